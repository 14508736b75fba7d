"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: dict = {}


def verdict(n: int, ok: bool, detail: str, elapsed: float, limit: float) -> None:
    within = elapsed <= limit
    passed = ok and within
    line = (f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
            f"  [{elapsed:.1f}s of {limit:.0f}s{'' if within else ', OVER TIME'}]")
    RESULTS[n] = line
    print(line)
    assert passed, line
