"""Console reports in the pipeline's house format.

Every stage prints a ``===== Stage N: ... summary =====`` block, collects
acceptance failures into a list and closes with a PASSED/FAILED banner.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import pandas as pd

SEPS = [",", ";"]
ENCS = ["utf-8", "utf-8-sig", "latin1"]

LABEL_WIDTH = 22


def project_root() -> Path:
    return Path(__file__).resolve().parents[1]


def processed_dir() -> Path:
    out_dir = project_root() / "data" / "processed"
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def robust_read_csv(path: Path, expected_cols: set[str]) -> pd.DataFrame:
    """Read a CSV trying several separators and encodings.

    Keeps the parse whose header overlaps ``expected_cols`` the most.
    """
    best_df = None
    best_score = -1
    last_err = None
    for sep in SEPS:
        for enc in ENCS:
            try:
                df = pd.read_csv(path, sep=sep, encoding=enc, dtype=str, keep_default_na=False)
                score = len(set(df.columns) & expected_cols)
                if score > best_score:
                    best_df = df
                    best_score = score
            except Exception as e:
                last_err = e
                continue
    if best_df is None:
        raise RuntimeError(f"Failed to read {path.name}. Last error: {last_err}")
    return best_df


def assert_condition(cond: bool, message: str, failures: list[str]) -> None:
    if not cond:
        failures.append(message)


def print_summary(stage: str, title: str, rows: Sequence[tuple[str, object]]) -> None:
    print(f"\n===== Stage {stage}: {title} summary =====")
    for label, value in rows:
        print(f"{label:<{LABEL_WIDTH}}: {value}")


def print_table(title: str, df: pd.DataFrame, limit: int = 10) -> None:
    print(f"\n===== {title} =====")
    if df.empty:
        print("(empty)")
    else:
        print(df.head(limit).to_string(index=False))


def finish_acceptance(stage: str, failures: Iterable[str]) -> int:
    """Print the acceptance banner; return the stage exit code."""
    failures = list(failures)
    if failures:
        print(f"\n===== ACCEPTANCE FAILED (Stage {stage}) =====")
        for f in failures:
            print(f"- {f}")
        return 2
    print(f"\n===== ACCEPTANCE PASSED (Stage {stage}) =====")
    return 0


def progress_enabled(args) -> bool:
    return not getattr(args, "no_progress", False)
