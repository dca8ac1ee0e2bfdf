"""
Are co-purchased items similar?
===============================

The synthetic generator ties features and interactions to the same latent
factors, so items bought by the same user should look alike. Two summary
statistics check that directly.
"""

from micro.dataset import generate_synthetic
from micro.evaluation import pilot_cointeraction_similarity, pilot_similar_purchase_proportion

data = generate_synthetic(200, 100, {"visual": 32, "textual": 16}, rank=8, noise=0.1, seed=0)

for modality, row in pilot_cointeraction_similarity(data.features, data.table).items():
    print(f"{modality:8s} all pairs {row['all_pairs']:+.3f}   co-interacted {row['co_interacted']:+.3f}")

###############################################################################
# Share of users owning at least one pair where one item is among the
# other's k nearest neighbors. Larger k can only add pairs.

for modality, row in pilot_similar_purchase_proportion(data.features, data.table, (5, 10, 15, 20)).items():
    print(modality, {k: round(v, 3) for k, v in row.items()})
