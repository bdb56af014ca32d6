"""The four black-box backdoor triggers, rendered as ASCII intensity maps.

Corner patch (BadNet-style), blended image, sinusoidal columns, and
edge-case samples; then client-level poisoning and the ASR test set.
"""

import numpy as np

from fedsim.attacks import (BadNetTrigger, BlendedTrigger, EdgeCaseTrigger,
                            PoisonSpec, SigTrigger, apply_trigger,
                            build_asr_testset, poison_client_dataset)
from fedsim.data import (LabeledImage, PartitionSpec, SyntheticSpec,
                         generate_synthetic, partition, split_3_1_1)

SHADES = " .:-=+*#%@"


def show(img, title):
    print(f"\n{title} (label {img.label})")
    for row in img.pixels[0]:
        print("   " + "".join(SHADES[min(int(v * 9.999), 9)] for v in row))


data = generate_synthetic(SyntheticSpec(num_classes=10, per_class=30, seed=3))
victim = data[40]
show(victim, "clean sample")

show(apply_trigger(victim, PoisonSpec(BadNetTrigger(), target_label=1)),
     "corner patch (3x3 checker, bottom-right)")

kitty = np.clip(np.add.outer(np.linspace(0, 1, 8), np.linspace(1, 0, 8)) / 2
                + 0.2, 0, 1)
show(apply_trigger(victim, PoisonSpec(BlendedTrigger(kitty, alpha=0.2),
                                      target_label=1)),
     "blended (alpha=0.2)")

show(apply_trigger(victim, PoisonSpec(SigTrigger(delta=20 / 255, freq=6),
                                      target_label=1)),
     "sinusoidal columns (delta=20/255, f=6)")

pool = tuple(LabeledImage(np.random.default_rng(i).uniform(0.3, 0.7, (1, 8, 8)), 7)
             for i in range(10))
edge = PoisonSpec(EdgeCaseTrigger(pool), target_label=1, seed=5)

# --- poisoning a client ------------------------------------------------------
clients = partition(data, PartitionSpec("dirichlet", 4, seed=1, alpha=0.5))
shards = [split_3_1_1(c, seed=cid) for cid, c in enumerate(clients)]
train = list(shards[0].train)
spec = PoisonSpec(BadNetTrigger(), target_label=1, poison_ratio=0.5, seed=4)
poisoned = poison_client_dataset(train, spec)
flipped = sum(1 for a, b in zip(poisoned, train) if a is not b)
print(f"\npoisoned {flipped} of {len(train)} training samples "
      f"(ratio 0.5, all relabeled to 1)")

extra = poison_client_dataset(train, edge)
print(f"edge-case poisoning appends {len(extra) - len(train)} pool images")

asr = build_asr_testset(shards, adversary_id=0, spec=spec)
print(f"ASR set: {len(asr.images)} triggered samples from clients "
      f"{sorted(set(asr.provenance))} (adversary 0 and true-label-1 excluded)")
