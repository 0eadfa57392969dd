"""
Training, evaluation and inspection
===================================

A short run on a few hundred scenes.  Real ablations train for 30 epochs
on 2000 scenes; this one trades accuracy for a quick turnaround.
"""

import json

from apl_avqa.harness.config import TrainConfig
from apl_avqa.harness.evaluate import evaluate, inspect
from apl_avqa.harness.train import train
from apl_avqa.scenes import generate_dataset

train_set, val_set, test_set = generate_dataset(0, 400)
config = TrainConfig(epochs=6, seed=0)

result = train(config, train_set, val_set, log=lambda r: print(json.dumps(r)))
print("best epoch", result.best_epoch, "val acc", round(result.best_val_acc, 3))

report = evaluate(result.model, test_set, config.loss)
print(json.dumps(report.as_dict(), indent=1))

# attention maps, beta and selected positives for one scene
dump = inspect(result.model, test_set, 0, config.loss)
print("question:", dump["question"], "beta:", dump["beta"])
