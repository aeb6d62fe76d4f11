"""A tour of the encoder: gradients, head and MLP masks, and what masking costs.

Run:  python demos/01_encoder_and_masks.py      (about 5 seconds)
"""

import numpy as np

from ticketlab import autograd as ag
from ticketlab.autograd import Tensor, grad_check
from ticketlab.encoder import ModelConfig, SubnetworkMask, count_params, forward, init_params

config = ModelConfig()
params = init_params(config, 0)
print(f"default encoder: {config.num_layers} layers x {config.num_heads} heads, "
      f"d={config.model_dim}, {count_params(params)} parameters")

tokens = np.random.default_rng(0).integers(0, config.vocab_size, size=(2, config.max_seq_len))

# 1. Reverse-mode gradients agree with central differences.
small = ModelConfig(num_layers=1, num_heads=2, model_dim=8, ff_dim=8, vocab_size=16, max_seq_len=4)
small_params = {k: v * 10 if v.ndim == 2 else v for k, v in init_params(small, 0).items()}
trainable = {k: Tensor(v, requires_grad=True) for k, v in small_params.items()}
small_tokens = tokens[:, :4] % 16


def loss():
    r = forward(small_params, small, token_ids=small_tokens, trainable=trainable)
    return ag.cross_entropy_logits(r.logits, np.array([0, 1]))


print(f"\nworst relative gradient error on a 1-layer model: {grad_check(loss, list(trainable.values())):.1e}")

# 2. An all-ones mask changes nothing, bit for bit.
with ag.no_grad():
    plain = forward(params, config, token_ids=tokens).logits.values
    ones = forward(params, config, SubnetworkMask.full(config), token_ids=tokens).logits.values
print(f"all-ones mask is bitwise identical: {plain.tobytes() == ones.tobytes()}")

# 3. Masked heads are skipped, so they cost no matrix-multiply FLOPs.
xi = np.ones((config.num_layers, config.num_heads), dtype=int)
xi[0, :2] = 0
xi[3, 3] = 0
with ag.count_ops() as full_ops, ag.no_grad():
    forward(params, config, SubnetworkMask.full(config), token_ids=tokens)
with ag.count_ops() as masked_ops, ag.no_grad():
    forward(params, config, SubnetworkMask(xi, np.ones(config.num_layers)), token_ids=tokens)
saved = full_ops.matmul_flops - masked_ops.matmul_flops
print(f"masking 3 heads saves {saved} of {full_ops.matmul_flops} matmul FLOPs ({saved / 3:.0f} per head)")

# 4. Masking an MLP turns its layer's feed-forward sublayer into the identity.
nu = np.array([1, 0, 1, 1])
with ag.no_grad():
    out = forward(params, config, SubnetworkMask(np.ones_like(xi), nu), token_ids=tokens).logits.values
print(f"logits with layer-1 MLP masked: {np.round(out, 4).tolist()}")
