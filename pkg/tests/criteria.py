"""Pass/fail bookkeeping for the acceptance suite."""

RESULTS = []


def verdict(number: int, ok: bool, detail: str, seconds: float):
    line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  ({seconds:.1f}s)  {detail}"
    RESULTS.append(line)
    print(line)
    return ok
