"""Plan and keyring files.

A plan directory holds ``plan.json`` (public: kinds, edges, key ids, who is
entitled to what) and one ``keyring-<party>.json`` per party with that
party's hex keys.  Keyrings are written with owner-only permissions.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

from collapse.protocols import KeyPlan, KeyRing, Party, PlanError

PLAN_FILE = "plan.json"


def ring_path(plan_dir: str | os.PathLike, party: Party) -> Path:
    return Path(plan_dir) / f"keyring-{party}.json"


def save_plan(plan_dir: str | os.PathLike, plan: KeyPlan, rings: Mapping[Party, KeyRing]) -> list[Path]:
    d = Path(plan_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = [d / PLAN_FILE]
    (d / PLAN_FILE).write_text(plan.dumps() + "\n", encoding="utf-8")
    for party, ring in rings.items():
        path = ring_path(d, party)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(ring.to_json(), fh, indent=2, ensure_ascii=False)
            fh.write("\n")
        written.append(path)
    return written


def load_plan(plan_dir: str | os.PathLike) -> KeyPlan:
    path = Path(plan_dir) / PLAN_FILE
    if not path.exists():
        raise PlanError(f"no {PLAN_FILE} in {plan_dir}")
    return KeyPlan.from_json(json.loads(path.read_text(encoding="utf-8")))


def load_ring(path_or_dir: str | os.PathLike, party: Party | None = None) -> KeyRing:
    path = Path(path_or_dir) if party is None else ring_path(path_or_dir, party)
    if not path.exists():
        raise FileNotFoundError(f"missing keyring {path}")
    return KeyRing.from_json(json.loads(path.read_text(encoding="utf-8")))


def check_ring(plan: KeyPlan, ring: KeyRing) -> None:
    """Refuse a ring that does not match its owner's plan entitlement."""
    ent = plan.entitlements.get(ring.owner)
    if ent is None:
        raise PlanError(f"party {ring.owner!r} is not part of this plan")
    if set(ring.keys) != ent:
        raise PlanError(
            f"keyring of {ring.owner!r} holds {sorted(ring.keys)}, plan expects {sorted(ent)}"
        )
