"""Constraint-aware refinement of model predictions.

A coarse predictor (a plain feed-forward net, or any external guess) is
pulled back onto a constraint manifold by running it through a short
deterministic denoising trajectory whose every step is corrected along
the constraint's steepest-descent direction with a closed-form step
size.  The package ships three evaluation tracks: a two-dimensional
toy landscape, AC power flow on small transmission grids, and
constraint-aware adversarial attacks on tabular data.
"""

__version__ = "0.1.0"
