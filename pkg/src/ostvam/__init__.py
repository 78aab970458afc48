"""Optical scattering tomography for tomographic volumetric printing."""
