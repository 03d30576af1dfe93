import re

_OUTCOMES = {}
TITLES = {
    "A1": "codec round trip and totality",
    "A2": "parameter-count identity",
    "A3": "shape fidelity",
    "A4": "gradient correctness",
    "A5": "sharing invariant",
    "A6": "metric oracle equivalence",
    "A7": "report fidelity",
    "A8": "planted-signal end-to-end run",
    "A9": "null-trial calibration",
    "A10": "determinism",
}
_CRITERION = re.compile(r"test_(a\d+)_")


def pytest_runtest_logreport(report):
    m = _CRITERION.match(report.nodeid.split("::")[-1])
    if not m or "test_acceptance" not in report.nodeid:
        return
    key = m.group(1).upper()
    if report.when == "call" or report.failed:
        if report.failed:
            _OUTCOMES[key] = "FAIL"
        elif report.skipped:
            _OUTCOMES.setdefault(key, "SKIP")
        else:
            _OUTCOMES.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_OUTCOMES, key=lambda k: int(k[1:])):
        terminalreporter.write_line(f"{key} {_OUTCOMES[key]}  {TITLES.get(key, '')}")
