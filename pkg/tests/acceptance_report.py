"""Collects one verdict line per acceptance criterion for the terminal summary."""

_VERDICTS: dict[int, str] = {}


def record(number: int, verdict: str, detail: str) -> str:
    line = f"criterion {number:>2}: {verdict} ({detail})"
    _VERDICTS[number] = line
    print(line)
    return line


def lines() -> list[str]:
    return [_VERDICTS[k] for k in sorted(_VERDICTS)]
