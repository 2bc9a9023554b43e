import sys

import numpy as np


class CountingRows:
    """Array proxy that counts how many rows are read through indexing."""

    def __init__(self, array):
        self.array = np.asarray(array)
        self.rows_read = 0

    @property
    def shape(self):
        return self.array.shape

    def __len__(self):
        return len(self.array)

    def __getitem__(self, item):
        out = self.array[item]
        self.rows_read += 1 if out.ndim < self.array.ndim else len(out)
        return out

    def __array__(self, dtype=None, copy=None):
        raise AssertionError("bulk conversion bypasses the access counter")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS, key=lambda n: (isinstance(n, str), str(n).zfill(3))):
        terminalreporter.write_line(mod.VERDICTS[n])
