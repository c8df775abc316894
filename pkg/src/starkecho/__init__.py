"""Photon echoes from reversible, Stark-controlled inhomogeneous broadening."""
