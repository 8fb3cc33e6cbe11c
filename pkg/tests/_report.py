"""Collects one pass/fail line per acceptance criterion."""
LINES = []


def record(num, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {title}" + (f" ({detail})" if detail else "")
    LINES.append(line)
    print(line)
    return ok
