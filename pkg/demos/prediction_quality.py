"""How well do similar past prompts predict expert activation?

Builds a clustered synthetic corpus, indexes 1800 prompts in the cluster
tree and predicts the remaining 200. Compares against the historical mean
(DOP), a uniform guess (EF) and exhaustive neighbour search.
"""
from __future__ import annotations

import numpy as np

from moeplan.prediction import (HistoricalRecord, baseline_predict, brute_force_search, build_tree, js_divergence,
                                predict_with_tree)
from moeplan.presets import preset_config
from moeplan.workload import CorpusParams, generate_clustered_corpus, trace_to_activation

m = preset_config("small-8x12").model
corpus = generate_clustered_corpus(4, 500, 1.0, 0, CorpusParams(m.num_layers, m.experts_per_layer, m.top_k))
order = np.random.default_rng(0).permutation(len(corpus))
history = [HistoricalRecord(corpus[i][0], trace_to_activation(corpus[i][1], "both")) for i in order[:1800]]
queries = [corpus[i] for i in order[1800:]]

tree = build_tree(history, alpha=15, beta=64, seed=0)
print(f"tree over {len(history)} prompts: {len(tree.nodes)} nodes, {len(tree.leaves)} leaves, "
      f"built in {tree.build_seconds:.2f}s")

dop = baseline_predict("DOP", history)
ef = baseline_predict("EF", history, experts_per_layer=m.experts_per_layer)
js = {"tree": [], "exhaustive": [], "DOP": [], "EF": []}
evals = {"tree": [], "exhaustive": []}
for prompt, trace in queries:
    truth = trace_to_activation(trace, "both")
    pred, res = predict_with_tree(tree, prompt, 15)
    js["tree"].append(js_divergence(pred, truth))
    evals["tree"].append(res.evaluations)
    evals["exhaustive"].append(brute_force_search(history, prompt, 15).evaluations)
    js["exhaustive"].append(js_divergence(baseline_predict("BF", history, prompt, 15), truth))
    js["DOP"].append(js_divergence(dop, truth))
    js["EF"].append(js_divergence(ef, truth))

print(f"\n{'predictor':10s} {'mean JS':>8s} {'similarity evals':>17s}")
for k, v in js.items():
    ev = f"{np.mean(evals[k]):17.1f}" if k in evals else f"{'-':>17s}"
    print(f"{k:10s} {np.mean(v):8.4f} {ev}")
