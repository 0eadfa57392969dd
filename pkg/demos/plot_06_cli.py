"""
Command line walkthrough
========================

The same steps as the shell commands

    apl-avqa gen-data --out data --samples 300
    apl-avqa train --data data --epochs 3 --out model.aplc
    apl-avqa eval --checkpoint model.aplc --data data
    apl-avqa gradcheck
"""

import tempfile
from pathlib import Path

from apl_avqa.harness.cli import main

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    print("gen-data ->", main(["gen-data", "--out", str(tmp / "data"), "--samples", "300"]))
    print("train ->", main(["train", "--data", str(tmp / "data"), "--epochs", "3", "--out", str(tmp / "model.aplc")]))
    print("eval ->", main(["eval", "--checkpoint", str(tmp / "model.aplc"), "--data", str(tmp / "data")]))
    print("gradcheck ->", main(["gradcheck", "--coords", "100"]))
    # a missing container is a data error, exit code 2
    print("bad data ->", main(["eval", "--checkpoint", str(tmp / "model.aplc"), "--data", str(tmp / "nope.aplf")]))
