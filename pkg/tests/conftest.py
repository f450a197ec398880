import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    selected = {int(item.name.split("_")[2]) for item in terminalreporter.config._acceptance_items}
    if not selected:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(selected):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n:2d}: FAIL (did not complete)"))


def pytest_collection_modifyitems(config, items):
    config._acceptance_items = [i for i in items if i.module.__name__ == "test_acceptance"
                                and i.name.startswith("test_criterion_")]
