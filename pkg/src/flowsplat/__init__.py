"""flowsplat: windowed dense monocular SLAM feeding a differentiable splat map.

Flow-based bundle adjustment over a sliding keyframe window drives a 3D
Gaussian map: tracked poses and inverse depths place and maintain the
gaussians (update / prune / densify via per-pixel reliability masks), while a
photometric + edge-aware geometric loss optimizes their appearance and shape
through a differentiable CPU rasterizer.
"""

__version__ = "0.1.0"
