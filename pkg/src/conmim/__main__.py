"""``python -m conmim``; honours CONMIM_THREADS before numpy loads."""

import os
import sys


def _thread_hint() -> None:
    hint = os.environ.get("CONMIM_THREADS")
    if not hint:
        return
    if not hint.isdigit() or int(hint) < 1:
        print(f"conmim: ignoring CONMIM_THREADS={hint!r} (want a positive integer)", file=sys.stderr)
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, hint)


def main() -> None:
    _thread_hint()
    from .cli import run_command

    sys.exit(run_command())


if __name__ == "__main__":
    main()
