"""Smoke test for the xlmh Python module.

Run after building the extension, for example:

    cargo build -p xlmh-py --release
    cp target/release/libxlmh.so python/xlmh.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import xlmh  # noqa: E402


def main():
    assert xlmh.tokenize("Nina msongo, sana!") == ["nina", "msongo", "sana"]
    assert xlmh.fnv1a64("nina") % 1024 == xlmh.featurize("nina", 1024)[0]
    assert xlmh.label_names(3) == ["minimum", "mild", "moderate", "severe"]

    assert math.isclose(xlmh.macro_f1([1, 0, 1, 1], [1, 0, 0, 1], 2), (0.8 + 2 / 3) / 2)
    assert xlmh.accuracy([0, None], [0, 1]) == 0.5

    src, tgt = xlmh.synthetic_pair(docs_per_class=30, vocab_size=200, seed=1)
    assert len(src) == len(tgt) == 60
    texts = [t for t, _ in src]
    labels = [y for _, y in src]

    model = xlmh.TextClassifier(2, vocab_size=1024, dim=8, seed=0)
    assert math.isclose(model.loss(texts, labels), math.log(2))
    tuned, losses = model.fine_tune(texts, labels, epochs=40)
    assert losses[-1] < losses[0]
    assert xlmh.accuracy(tuned.predict(texts), labels) > 0.9
    assert all(math.isclose(sum(p), 1.0) for p in tuned.predict_proba(texts[:3]))

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.params")
        tuned.save(path, task_id=1)
        assert xlmh.TextClassifier.load(path) == tuned

        prompts = xlmh.render_prompts(1, "so much work", "english")
        assert len(prompts) == 2 and all("so much work" in p for p in prompts)

        cfg = {
            "task_id": 1,
            "dataset": "synthetic",
            "paths": {"corpora": os.path.join(d, "data"), "output": os.path.join(d, "runs")},
            "synth": {"docs_per_class": 20},
            "icl": {"k": 2, "backend": {"kind": "mock"}},
            "seeds": [0],
        }
        cfg_path = os.path.join(d, "c.json")
        with open(cfg_path, "w") as f:
            json.dump(cfg, f)
        os.makedirs(cfg["paths"]["corpora"])
        assert xlmh.run_cli(["synth-gen", "--config", cfg_path]) == 0
        assert xlmh.run_cli(["icl-run", "--config", cfg_path]) == 0
        assert xlmh.run_cli(["no-such-command"]) == 2

    print("smoke test passed")


if __name__ == "__main__":
    main()
