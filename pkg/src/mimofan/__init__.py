"""MIMO-FAN segmentation on a minimal rank-4 autodiff engine."""
