"""Encoder bridge: exposes pretrained text encoders to the insertion engine.

Two surfaces, both engine-facing interfaces rather than Python APIs: bulk
embedding export in the ``UVIEMB1`` binary format, and a long-running pair
scorer speaking newline-delimited JSON over stdio or a local TCP socket.
"""

__version__ = "0.1.0"
