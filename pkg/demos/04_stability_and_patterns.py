"""How stable are the surviving heads, and what do their attention maps look like?

* Fleiss' kappa treats each seed as a rater voting "survives" for every head;
  Cochran's Q tests whether the seeds differ in how many heads they keep.
* The overlap matrix counts heads that survive (in a majority of seeds) for
  two tasks at once.
* Each head's attention map is sorted into diagonal, vertical,
  vertical+diagonal, block or heterogeneous.

Run:  python demos/04_stability_and_patterns.py      (about 40 seconds)
"""

from collections import Counter

from ticketlab.analysis import (
    attention_maps,
    classify_pattern,
    cochran_q,
    fleiss_kappa,
    overlap_matrix,
    prototype_gold_set,
    survival_table,
)
from ticketlab.encoder import ModelConfig
from ticketlab.pruning import structured_prune_loop
from ticketlab.tasks import make_pretrain_corpus, make_task
from ticketlab.training import PretrainConfig, TrainConfig, pretrain_mlm

config = ModelConfig(num_layers=2, num_heads=4, model_dim=16, ff_dim=32)
checkpoint = pretrain_mlm(None, make_pretrain_corpus(0, 1000), config,
                          PretrainConfig(steps=150, batch_size=16))
train = TrainConfig(epochs=3, batch_size=16, learning_rate=1e-2)

masks = {}
for name in ("sentiment", "paraphrase"):
    task = make_task(name, 0, train_size=192, dev_size=96)
    masks[name] = [structured_prune_loop(checkpoint, task, seed, train_config=train)[0] for seed in range(4)]
    table = survival_table(masks[name])
    q, p = cochran_q(table)
    print(f"{name}: heads kept per seed {[m.num_heads for m in masks[name]]}, "
          f"kappa {fleiss_kappa(table):.3f}, Cochran Q {q:.2f} (p={p:.3f})")

ov = overlap_matrix(masks)
print(f"\nmajority-surviving heads shared between tasks:\n{ov['heads']}")

maps, labels = prototype_gold_set(seed=0, per_class=40)
hits = sum(classify_pattern(m) == lab for m, lab in zip(maps, labels))
print(f"\nclassifier on {len(maps)} noisy prototype maps: {hits / len(maps):.1%} correct")

tokens = make_task("sentiment", 0, 64, 16).dev.tokens
raw, normed = attention_maps(checkpoint.params, config, tokens)
for variant, per_head in (("raw", raw), ("normed", normed)):
    counts = Counter(classify_pattern(m) for stack in per_head.values() for m in stack)
    print(f"pretrained {variant} attention patterns: {dict(sorted(counts.items()))}")
