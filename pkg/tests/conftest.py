ACCEPTANCE_LABELS = {
    "test_gradient_correctness": "gradient correctness vs central finite differences",
    "test_closed_form_loss_values": "closed-form loss values (rank / in-batch / mixture)",
    "test_sampler_fidelity": "task sampler fidelity over 1e6 draws",
    "test_search_oracle_equivalence": "dense + bm25 search vs exhaustive oracles",
    "test_synthetic_end_to_end": "synthetic end-to-end training gains",
    "test_budget_and_ordering_properties": "prompt budget and ordering properties",
    "test_determinism": "seeded training and artifact round-trip determinism",
}


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(report, "nodeid", ""):
                continue
            name = report.nodeid.split("::")[-1]
            label = ACCEPTANCE_LABELS.get(name)
            if label:
                status = "PASS" if outcome == "passed" else "FAIL"
                lines.append(f"[acceptance] {status}: {label}")
    if lines:
        terminalreporter.write_line("")
        for line in sorted(lines):
            terminalreporter.write_line(line)
