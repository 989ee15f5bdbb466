"""Text encoders behind one contract: encode(texts) -> float32 (n, dim).

``hash:...`` checkpoints select the dependency-free hashed-ngram encoder,
deterministic across platforms, used for tests and offline runs.  Any other
identifier is treated as a Hugging Face checkpoint and loaded lazily (the
``hf`` extra provides transformers/torch); the model is only ever run in
eval mode, never trained or fine-tuned here.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .config import BridgeConfig, BridgeConfigError, parse_hash_checkpoint


class HashNgramEncoder:
    """Hashed character-ngram embeddings; pure function of the text."""

    def __init__(self, dim: int = 64, seed: int = 0, ngram: int = 3, max_length: int = 320):
        self.dim = dim
        self.seed = seed
        self.ngram = ngram
        self.max_length = max_length
        self._salt = f"vocbridge:{seed}".encode("utf-8")

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            s = f" {text[: self.max_length].casefold()} "
            span = max(1, len(s) - self.ngram + 1)
            for i in range(span):
                gram = s[i : i + self.ngram]
                digest = hashlib.blake2b(
                    gram.encode("utf-8"), digest_size=8, salt=self._salt[:16]
                ).digest()
                idx = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] & 1 else -1.0
                out[row, idx] += sign
            norm = np.linalg.norm(out[row])
            if norm == 0.0:
                out[row, 0] = 1.0
                norm = 1.0
            out[row] /= norm
        return out.astype(np.float32)


class TransformersEncoder:
    """Mean-pooled hidden states from a pretrained checkpoint (consumed
    as-is; no training happens in the bridge)."""

    def __init__(self, checkpoint: str, batch_size: int = 64, max_length: int = 320,
                 device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise BridgeConfigError(
                "transformers/torch are required for non-hash checkpoints; "
                "install the 'hf' extra"
            ) from exc
        self._torch = torch
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
            self.model = AutoModel.from_pretrained(checkpoint)
        except Exception as exc:
            raise BridgeConfigError(f"cannot load checkpoint {checkpoint!r}: {exc}") from exc
        self.model.eval()
        self.device = device
        self.model.to(device)
        self.batch_size = batch_size
        self.max_length = min(max_length, getattr(self.tokenizer, "model_max_length", max_length))
        self.dim = int(self.model.config.hidden_size)

    def encode(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        chunks = []
        for start in range(0, len(texts), self.batch_size):
            batch = texts[start : start + self.batch_size]
            try:
                tokens = self.tokenizer(
                    batch,
                    padding=True,
                    truncation=True,
                    max_length=self.max_length,
                    return_tensors="pt",
                ).to(self.device)
                with torch.no_grad():
                    hidden = self.model(**tokens).last_hidden_state
                mask = tokens["attention_mask"].unsqueeze(-1).float()
                pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
                chunks.append(pooled.cpu().numpy().astype(np.float32))
            except RuntimeError as exc:
                if "out of memory" in str(exc).lower():
                    raise BridgeConfigError(
                        f"encoder ran out of memory on a batch of {len(batch)}; "
                        "reduce --batch-size"
                    ) from exc
                raise
        return np.concatenate(chunks) if chunks else np.zeros((0, self.dim), np.float32)


def build_encoder(config: BridgeConfig):
    if config.checkpoint.startswith("hash:") or config.checkpoint == "hash":
        params = parse_hash_checkpoint(
            config.checkpoint if config.checkpoint.startswith("hash:") else "hash:"
        )
        return HashNgramEncoder(max_length=config.max_length, **params)
    return TransformersEncoder(
        config.checkpoint,
        batch_size=config.batch_size,
        max_length=config.max_length,
        device=config.device,
    )
