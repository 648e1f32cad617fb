"""Exception hierarchy; classes carry the CLI exit code they map to."""


class DemoretError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 4


class InputError(DemoretError):
    """Malformed or invalid user-supplied input (files, config, flags)."""

    exit_code = 2


class ParseError(InputError):
    """A file failed to parse; message names the offending line."""


class ConfigError(InputError):
    """Invalid configuration or registry contents."""


class TemplateError(InputError):
    """A template pattern violates its placeholder contract."""


class DataError(InputError):
    """An example record violates a dataset invariant."""


class FormatError(InputError):
    """A binary artifact has the wrong magic, version, or length."""


class BudgetError(InputError):
    """The test input alone does not fit the context budget."""


class ArtifactError(DemoretError):
    """A required artifact (checkpoint, index, run dir) is missing."""

    exit_code = 3


class StateError(DemoretError):
    """An operation was invoked against stale or absent runtime state."""


class ScoringError(DemoretError):
    """A scorer failed or produced an unusable value."""


class ContractError(DemoretError):
    """An internal call violated a module contract."""
