"""One PASS/FAIL line per acceptance criterion, collected while the suite runs."""

LINES: dict[int, str] = {}


def report(n: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    LINES[n] = line
    print(line)
