import pytest

from thermo_billiards.geometry import reference_table, single_disk_table


@pytest.fixture(scope="session")
def table():
    return reference_table()


@pytest.fixture(scope="session")
def disk_table():
    return single_disk_table(radius=0.25, sigma_cap=3.0)


class FixedRng:
    """Stand-in stream that replays given uniforms / normals."""

    def __init__(self, uniforms=(), normals=()):
        self._u = list(uniforms)
        self._z = list(normals)

    def uniforms(self, n):
        import numpy as np

        out, self._u = self._u[:n], self._u[n:]
        return np.array(out, dtype=float)

    def normals(self, n):
        import numpy as np

        out, self._z = self._z[:n], self._z[n:]
        return np.array(out, dtype=float)


# one summary line per acceptance criterion: (criterion id -> detail text)
ACCEPTANCE_DETAILS: dict = {}


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_ac" not in nodeid or rep.when != "call" and outcome != "error":
                continue
            name = nodeid.split("::")[-1]
            ac = name.split("_")[1].upper()
            rows.append((int(ac[2:]), ac, "PASS" if outcome == "passed" else "FAIL", name))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for _, ac, verdict, name in sorted(rows):
        detail = ACCEPTANCE_DETAILS.get(ac, "")
        terminalreporter.write_line(f"{ac} {verdict}  {name}  {detail}".rstrip())
