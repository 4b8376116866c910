"""Image-guided point-cloud completion with weak supervision through a differentiable silhouette renderer."""

__version__ = "0.1.0"
