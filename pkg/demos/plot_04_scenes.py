"""
Synthetic scenes and the feature container
==========================================
"""

import tempfile
from pathlib import Path

import numpy as np
from apl_avqa.scenes import SceneDims, answer_names, generate_scene, generate_dataset, make_bank, read_container, write_container

dims = SceneDims()
bank = make_bank(0, dims)
scene = generate_scene(3, dims, bank)
names = answer_names(dims.n_instruments)

print("Q:", scene.question, "A:", names[scene.label])
# slot ids: instrument index per object slot, -1 for clutter
print(scene.slot_ids)
print("sounding\n", scene.sounding.astype(int))

train, val, test = generate_dataset(0, 300)
print("splits", len(train), len(val), len(test), "types", np.bincount(train.question_types))

# the binary container round-trips bit for bit
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "test.aplf"
    write_container(path, test)
    print("round trip exact:", read_container(path).to_bytes() == test.to_bytes())
