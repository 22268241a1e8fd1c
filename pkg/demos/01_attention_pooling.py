"""Attention pooling on a toy bag of frame embeddings.

Run: python3 demos/01_attention_pooling.py

We build five "frames" whose embeddings are random except frame 3, which
lines up with the query of head 0. Head 0 should put most of its weight on
that frame, while a head with a zero query spreads its weight evenly and so
reduces to plain averaging. Shuffling the frames leaves the pooled vector
unchanged.
"""
import torch

from usvid.metrics import attention_entropy
from usvid.pooling import attention_pool, average_pool

torch.manual_seed(0)
T, D, HEADS = 5, 8, 2
emb = torch.randn(1, T, D) * 0.3
queries = torch.zeros(HEADS, D // HEADS)
queries[0] = torch.tensor([2.0, 0.0, 0.0, 2.0])
emb[0, 3, :4] = queries[0]          # frame 3 matches head 0
mask = torch.ones(1, T, dtype=torch.bool)

pooled, rec = attention_pool(emb, queries, mask)
print("per-head weights over the 5 frames:")
for h in range(HEADS):
    row = " ".join(f"{w:.3f}" for w in rec.weights[0, h].tolist())
    print(f"  head {h}: {row}")
print("entropy (nats):", [round(e, 3) for e in attention_entropy(rec.unbatch()[0]).tolist()])

# head 1 has a zero query, so its half of the output is the frame mean
print("head 1 equals mean of its slice:",
      torch.allclose(pooled[0, 4:], average_pool(emb, mask)[0, 4:]))

perm = torch.randperm(T)
shuffled, _ = attention_pool(emb[:, perm], queries, mask)
print("order invariant:", torch.allclose(pooled, shuffled, atol=1e-6))

# padding: extra junk frames behind a False mask do not move the output
junk = torch.cat([emb, 100 * torch.ones(1, 3, D)], dim=1)
pad_mask = torch.cat([mask, torch.zeros(1, 3, dtype=torch.bool)], dim=1)
padded, _ = attention_pool(junk, queries, pad_mask)
print("padding invariant:", torch.allclose(pooled, padded, atol=1e-6))
