"""SIMP dataset generation, WGAN synthesis and CNN parameter regression for planar topologies."""

__version__ = "0.1.0"
