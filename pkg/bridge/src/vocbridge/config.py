"""Bridge configuration and checkpoint identifier parsing."""

from __future__ import annotations

from dataclasses import dataclass

#: The engine caps each text side at 256 characters before appending its
#: markers; the longest suffixed side is the query plus
#: " (No Preferred Candidate)" = 281 characters.  Subword tokenizers never
#: produce more tokens than characters, so 281 is a safe floor in either
#: unit and guarantees the trailing markers are never truncated away.
MIN_SEQUENCE_LENGTH = 281


class BridgeConfigError(ValueError):
    pass


@dataclass
class BridgeConfig:
    """Checkpoint, batching, and transport settings for both surfaces."""

    checkpoint: str = "hash:dim=64"
    batch_size: int = 64
    max_length: int = 320
    device: str = "cpu"
    transport: str = "stdio"  # stdio | socket
    host: str = "127.0.0.1"
    port: int = 8377
    logit_scale: float = 10.0
    record_path: str | None = None

    def validate(self) -> None:
        if self.batch_size < 1:
            raise BridgeConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_length < MIN_SEQUENCE_LENGTH:
            raise BridgeConfigError(
                f"max_length {self.max_length} is below the {MIN_SEQUENCE_LENGTH} "
                "floor required to keep marker-suffixed candidates intact"
            )
        if self.transport not in ("stdio", "socket"):
            raise BridgeConfigError(f"unknown transport {self.transport!r}")
        if not self.checkpoint:
            raise BridgeConfigError("checkpoint identifier is required")


def parse_hash_checkpoint(checkpoint: str) -> dict:
    """``hash:dim=64,seed=0,ngram=3`` -> keyword arguments."""
    params = {"dim": 64, "seed": 0, "ngram": 3}
    spec = checkpoint[len("hash:") :]
    if spec:
        for part in spec.split(","):
            key, _, value = part.partition("=")
            if key not in params or not value:
                raise BridgeConfigError(f"bad hash checkpoint parameter {part!r}")
            params[key] = int(value)
    if params["dim"] < 1 or params["ngram"] < 1:
        raise BridgeConfigError(f"bad hash checkpoint spec {checkpoint!r}")
    return params
