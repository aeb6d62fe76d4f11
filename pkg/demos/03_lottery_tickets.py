"""Good, random and bad subnetworks, each retrained from the pretrained weights.

For every task and seed the pruning loops give a "good" mask; a "random" mask
of the same size is drawn uniformly, and a "bad" one prefers the components
pruning removed.  All three are fine-tuned again and compared with the full
model's seed mean minus one standard deviation (the success bar).

Run:  python demos/03_lottery_tickets.py      (about 3 minutes)
"""

import numpy as np

from ticketlab.encoder import ModelConfig
from ticketlab.experiments import BAD, GOOD, RANDOM, RANDOM_INIT, ExperimentSettings, run_experiment, summarize
from ticketlab.tasks import make_pretrain_corpus, make_task
from ticketlab.training import PretrainConfig, TrainConfig, pretrain_mlm

config = ModelConfig(num_layers=2, num_heads=4, model_dim=32, ff_dim=64)
checkpoint = pretrain_mlm(None, make_pretrain_corpus(0, 5000), config,
                          PretrainConfig(steps=1500, batch_size=32))
suite = [make_task(name, 0, train_size=384, dev_size=128) for name in ("sentiment", "paraphrase")]
settings = ExperimentSettings(train=TrainConfig(epochs=4, batch_size=16, learning_rate=1e-3), seeds=(0, 1, 2))
result = run_experiment(checkpoint, suite, settings)
summary = summarize(result)

for task in suite:
    full = list(result.full_metrics[task.name].values())
    bar = np.mean(full) - np.std(full, ddof=1)
    print(f"\n{task.name}: full {np.mean(full):.3f} +- {np.std(full, ddof=1):.3f}, success bar {bar:.3f}")
    for method in ("m", "s"):
        cells = [f"{kind} {summary[(task.name, method, kind)][0]:.3f}" for kind in (GOOD, RANDOM, BAD)]
        print(f"  {method}-pruning retrained: " + ", ".join(cells))
    print(f"  random init + random s-mask: {summary[(task.name, 's', RANDOM_INIT)][0]:.3f} "
          f"(majority class {task.majority_baseline():.3f})")
