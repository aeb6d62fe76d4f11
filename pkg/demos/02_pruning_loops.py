"""Find "good" subnetworks with both pruning methods on one task.

A small encoder is pretrained with masked-language modelling, fine-tuned on
the sentiment task, then pruned two ways while dev accuracy stays at or above
90% of the full model:

* structured pruning removes whole attention heads and MLP blocks, lowest
  importance score (mean absolute gradient of the loss w.r.t. a gate) first;
* magnitude pruning removes the smallest 10% of the surviving weights per step.

Run:  python demos/02_pruning_loops.py      (about 30 seconds)
"""

from ticketlab.encoder import ModelConfig
from ticketlab.pruning import count_surviving, count_total, magnitude_prune, structured_prune
from ticketlab.tasks import make_pretrain_corpus, make_task
from ticketlab.training import PretrainConfig, TrainConfig, fine_tune, pretrain_mlm

config = ModelConfig(num_layers=2, num_heads=4, model_dim=16, ff_dim=32)
checkpoint = pretrain_mlm(None, make_pretrain_corpus(0, 1000), config,
                          PretrainConfig(steps=150, batch_size=16))
task = make_task("sentiment", seed=0, train_size=256, dev_size=128)
model, full = fine_tune(checkpoint, task, TrainConfig(epochs=4, batch_size=16, learning_rate=1e-2))
print(f"full model dev accuracy: {full:.3f}; keep at least {0.9 * full:.3f}\n")

mask, trace = structured_prune(model, threshold=0.9)
print("structured pruning")
for e in trace:
    print(f"  step {e.iteration:2d}  {e.phase:15s} dev {e.dev_metric:.3f}  "
          f"size {e.surviving_fraction:.2f}  removed {e.masked_elements_this_step}")
print(f"  kept heads per layer: {mask.xi.sum(1).tolist()}, MLPs: {mask.nu.tolist()}\n")

wmask, trace = magnitude_prune(model, threshold=0.9)
print("magnitude pruning")
for e in trace[:: max(1, len(trace) // 8)]:
    print(f"  step {e.iteration:2d}  dev {e.dev_metric:.3f}  weights left {e.surviving_fraction:.3f}")
print(f"  final: {count_surviving(wmask)} of {count_total(wmask)} weights survive")

# A threshold above 1 can never be met by the full model itself, so the loop
# returns it untouched; a threshold of 0 prunes everything.
print(f"\nthreshold 1.01 keeps {structured_prune(model, threshold=1.01)[0].num_heads} heads; "
      f"threshold 0 keeps {structured_prune(model, threshold=0.0)[0].num_heads}")
