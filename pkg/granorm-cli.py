"""Command line entry point for granorm."""

from __future__ import annotations

from granorm.cli import main

if __name__ == "__main__":  # pragma: no cover - CLI entry
    raise SystemExit(main())
