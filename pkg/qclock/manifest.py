"""
Run manifests for qclock artifacts.

Every CSV and JSON file the CLI writes records the manifest that produced
it: the subcommand, the fully resolved settings, the master seed and the
tool version.
"""

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

from qclock import __version__


@dataclass(frozen=True)
class RunManifest:
    """Provenance of one CLI invocation."""
    subcommand: str
    config: dict
    master_seed: Optional[int] = None
    artifacts: tuple = ()
    version: str = __version__
    created: str = field(
        default_factory=lambda: datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    )

    def with_artifacts(self, *paths) -> "RunManifest":
        return RunManifest(
            subcommand=self.subcommand,
            config=self.config,
            master_seed=self.master_seed,
            artifacts=self.artifacts + tuple(str(p) for p in paths if p),
            version=self.version,
            created=self.created,
        )

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "master_seed": self.master_seed,
            "artifacts": list(self.artifacts),
            "version": self.version,
            "created": self.created,
        }

    def to_header(self) -> str:
        """Single-line JSON for a '#'-prefixed CSV header."""
        return "qclock manifest " + json.dumps(self.to_dict(), sort_keys=True)
