"""Action-conditioned sequential latent prediction at desk scale.

A small world-model library: a view encoder, linear action embedder,
transformer aggregator with a learnable aggregate token, an
action-conditioned predictor trained against an EMA target encoder,
plus synthetic transformation worlds (rotating sprites, saccadic
patch sequences) and a frozen-representation evaluation battery.
"""

__version__ = "0.1.0"
