"""Build one entity's input sequence and its visibility mask on a hand-made graph.

Run: python3 demos/01_sequences_and_masks.py
"""

import numpy as np

from moalign.data import make_kg
from moalign.encoding import build_mask, build_sequence

kg = make_kg(
    relational=[("paris", "capital_of", "france"), ("louvre", "located_in", "paris")],
    text=[("paris", "name", "city of light")],
    image=[("paris", "photo", [0.3, -1.2, 0.8, 2.0, 0.1])],
    types={"paris": "City", "france": "Country", "louvre": "Museum"},
)

seq = build_sequence("paris", kg, limits=(8, 8), rng=0)
print(f"sequence for {seq.entity!r}: {len(seq)} tokens")
print(f"{'pos':>3}  {'tag':<18}{'source':<32}{'modality':>8}{'structure':>10}")
for i, tok in enumerate(seq.tokens):
    print(f"{i:>3}  {tok.type_tag.name:<18}{str(tok.source):<32}{tok.modality_code:>8}"
          f"{tok.structure_code:>10}")

# Neighbors get codes 2i / 2i+1 in the frozen random order; everything else is 1.
print("\nneighbor order:", seq.neighbor_order)

mask = build_mask(seq, kg)
print("\nmask (1 = visible):")
print(np.array2string(mask.bits, separator=" "))
print("\nrows of the entity token and of CLS are what the encoder queries with;")
print("the entity row sees every token that shares a triplet with it.")
