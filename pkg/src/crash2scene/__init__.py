"""Reconstruct executable driving scenarios from multimodal crash reports.

The package turns a crash report (sketch image, narrative text, tabular
metadata) into an OpenDRIVE road network plus an OpenSCENARIO storyboard whose
free parameters are fitted by a genetic algorithm against an internal
kinematic simulator.
"""

__version__ = "0.1.0"
