"""Fixed concept ordering shared by the model, data generator, and reports.

The order is load-bearing: causal-graph rows/columns, latent slot indices,
and generator heads all index concepts the same way.
"""

CONCEPTS = ("poi", "bike", "taxi", "bus", "v")
MODALITIES = ("bike", "taxi", "bus", "v")
OBS_CHANNELS = {"bike": 2, "taxi": 2, "bus": 2, "v": 1}
TOTAL_OBS_CHANNELS = sum(OBS_CHANNELS.values())
N_CONCEPTS = len(CONCEPTS)
