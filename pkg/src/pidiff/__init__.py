"""Physics-informed diffusion for visible-to-infrared translation, desk scale."""
__version__ = "0.1.0"
