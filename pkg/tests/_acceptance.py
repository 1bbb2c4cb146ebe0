"""Collects one summary line per acceptance criterion for the terminal report."""

LINES = []


def record(number, ok, detail, seconds):
    LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({seconds:.1f} s) {detail}")
