import pytest

_criteria = {}


def pytest_addoption(parser):
    parser.addoption("--public-data", action="append", default=[], metavar="MANIFEST",
                     help="manifest of a converted public dataset for the full-scale run (repeatable)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, text = mark.args
    entry = _criteria.setdefault(number, {"text": text, "outcomes": [], "notes": []})
    entry["outcomes"].append(rep.outcome)
    entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        if "failed" in e["outcomes"]:
            status = "FAIL"
        elif all(o == "skipped" for o in e["outcomes"]):
            status = "SKIP"
        else:
            status = "PASS"
        line = f"criterion {n:>2} {status}  {e['text']}"
        if e["notes"]:
            line += "  [" + ", ".join(dict.fromkeys(e["notes"])) + "]"
        terminalreporter.write_line(line)
