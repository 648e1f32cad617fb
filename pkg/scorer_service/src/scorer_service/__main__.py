"""Serve the scorer: python -m scorer_service (port from SCORER_PORT)."""

import os

import uvicorn

from .app import create_app


def main() -> None:
    port = int(os.environ.get("SCORER_PORT", "8901"))
    uvicorn.run(create_app(), host="127.0.0.1", port=port)


if __name__ == "__main__":
    main()
