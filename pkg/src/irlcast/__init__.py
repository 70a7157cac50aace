"""Grid MaxEnt-IRL trajectory forecasting at desk scale.

A reward over a drivable grid is learned from demonstrations, a stochastic
policy is derived by soft value iteration, multimodal plans sampled from it
are decoded into Bezier-parameterized trajectories, and a refinement stage
with hybrid probability fusion produces the final forecasts.  An HTTP
service exposes the pipeline for interactive what-if edits of the drivable
area.
"""

__version__ = "0.1.0"
