"""Desk-scale inverse graphics toolkit.

Differentiable rasterization trains a shape/texture prediction network from
binned-viewpoint multi-view data with joint camera optimization; the trained
network then disentangles a layered latent decoder into explicit
viewpoint/shape/texture/background controls.
"""

__version__ = "0.1.0"
