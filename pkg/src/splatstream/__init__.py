"""Online Gaussian splat scene streaming.

A server builds and continuously optimizes a 3D Gaussian splat model of a
synthetic scene from engine-rendered color/depth buffers, and streams it to
clients as quantized snapshots plus per-attribute deltas. Clients mirror the
model and render it locally from any viewpoint.
"""

__version__ = "0.1.0"
