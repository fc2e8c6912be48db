"""Walk through CTC scoring and prefix beam search on a hand-made lattice.

Run: python demos/ctc_toy.py
"""

import numpy as np

from multiunit.ctc import ctc_label_score, ctc_loss, greedy_decode, prefix_beam_search

# three frames over {blank, a, b}
probs = np.array([
    [0.5, 0.4, 0.1],
    [0.4, 0.3, 0.3],
    [0.6, 0.1, 0.3],
])
lat = np.log(probs)
names = {1: "a", 2: "b"}

for labels in ([1], [1, 2], [2, 1], [1, 1]):
    score = ctc_label_score(lat, labels)
    print(f"P({''.join(names[i] for i in labels)}) = {np.exp(score):.4f}")

loss, grad = ctc_loss(lat, [1])
print(f"\nloss for 'a' = {loss:.4f}; gradient wrt logits:\n{np.round(grad, 4)}")

g = greedy_decode(lat)
print(f"\ngreedy: {''.join(names[i] for i in g.ids) or '<empty>'}")
print("beam search 4-best:")
for h in prefix_beam_search(lat, beam_width=8, nbest=4):
    print(f"  {''.join(names[i] for i in h.ids) or '<empty>':6s} {h.scores['ctc_wordpiece']:.4f}")
