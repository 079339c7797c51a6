"""Regenerate the shipped fixtures under src/bss/fixtures/.

Evaluation fixture: 12 images, 4 classes (D00, D10, D20, D40) with a
planted match pattern per class, in descending score order:

    D00  4 GT: TP, TP, FP(background), TP, FP(duplicate); one GT missed
         AP = .25 + .25 + .25 * .75 = 0.6875
    D10  2 GT: TP, FP(mislocalised), TP           AP = 0.5 + 0.5 * 2/3
    D20  3 GT: FP(background), FP(mislocalised)   AP = 0
    D40  3 GT: TP, TP; one GT missed              AP = 2/3
    mAP = (0.6875 + 0.833333 + 0 + 0.666667) / 4 = 0.546875

Tensor fixtures: small seeded inputs for simam, sa and a tiny neck graph,
plus their expected outputs.

Run from the repo root:  python scripts/make_fixtures.py
"""
import json
from pathlib import Path

import numpy as np

from bss import bifpn, metrics, shuffle_attention as sa, simam
from bss.io import dumps_json, tensor_to_json

ROOT = Path(__file__).resolve().parents[1] / "src" / "bss" / "fixtures"
NAMES = ["D00", "D10", "D20", "D40"]

# (image, class, cx, cy, w, h)
GT = [
    ("img00", 0, 0.30, 0.40, 0.20, 0.10),
    ("img01", 0, 0.50, 0.50, 0.30, 0.20),
    ("img02", 0, 0.70, 0.20, 0.10, 0.30),
    ("img03", 0, 0.25, 0.75, 0.20, 0.20),  # never detected
    ("img04", 1, 0.40, 0.60, 0.40, 0.10),
    ("img05", 1, 0.60, 0.30, 0.20, 0.20),
    ("img06", 2, 0.50, 0.50, 0.20, 0.40),
    ("img07", 2, 0.20, 0.20, 0.10, 0.10),
    ("img07", 2, 0.80, 0.80, 0.10, 0.10),
    ("img08", 3, 0.50, 0.50, 0.30, 0.30),
    ("img09", 3, 0.30, 0.70, 0.20, 0.20),
    ("img00", 3, 0.75, 0.75, 0.20, 0.20),
]
IMAGES = [f"img{i:02d}" for i in range(12)]  # img10, img11 have no GT


def scaled(gt, s):
    image, cls, cx, cy, w, h = gt
    return image, cls, [cx, cy, round(w * s, 6), round(h * s, 6)]


def shifted(gt, dx):
    image, cls, cx, cy, w, h = gt
    return image, cls, [round(cx + dx * w, 6), cy, w, h]


# (image, class, bbox, score, planted label)
DETS = [
    (*scaled(GT[0], 1.1), 0.95, "TP"),
    (*scaled(GT[1], 0.9), 0.90, "TP"),
    ("img10", 0, [0.50, 0.50, 0.20, 0.20], 0.85, "FP"),
    (*scaled(GT[2], 1.05), 0.80, "TP"),
    (*scaled(GT[1], 1.0), 0.75, "FP"),
    (*scaled(GT[4], 1.0), 0.92, "TP"),
    (*shifted(GT[5], 0.8), 0.88, "FP"),
    (*scaled(GT[5], 0.95), 0.70, "TP"),
    ("img11", 2, [0.40, 0.40, 0.20, 0.20], 0.66, "FP"),
    (*shifted(GT[6], 0.9), 0.55, "FP"),
    (*scaled(GT[9], 1.0), 0.97, "TP"),
    (*scaled(GT[11], 0.9), 0.60, "TP"),
]


def write_eval():
    d = ROOT / "eval"
    (d / "gt").mkdir(parents=True, exist_ok=True)
    for image in IMAGES:
        rows = [g for g in GT if g[0] == image]
        text = "".join(f"{c} {cx} {cy} {w} {h}\n" for _, c, cx, cy, w, h in rows)
        (d / "gt" / f"{image}.txt").write_text(text)
    lines = [json.dumps({"image": i, "class": c, "bbox": b, "score": s}) for i, c, b, s, _ in DETS]
    (d / "det.jsonl").write_text("\n".join(lines) + "\n")
    (d / "planted_labels.json").write_text(dumps_json([lab for *_, lab in DETS]))
    rep = metrics.eval_dataset(d / "gt", d / "det.jsonl", 0.5, 4, NAMES)
    (d / "golden_report.json").write_text(dumps_json(rep.to_dict()))
    print("eval mAP", rep.map)


def write_tensors():
    d = ROOT / "tensors"
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240917)

    def save(name, arr):
        (d / f"{name}.json").write_text(json.dumps(tensor_to_json(arr)) + "\n")

    x = rng.standard_normal((1, 8, 4, 4)).astype(np.float32)
    save("simam_in", x)
    save("simam_out", simam.simam_forward(x, simam.SimAMConfig(1e-4)))

    x = rng.standard_normal((1, 8, 4, 4)).astype(np.float32)
    save("sa_in", x)
    save("sa_out", sa.sa_forward(x, sa.SAConfig(groups=2, shuffle_groups=2)))

    g = bifpn.load_graph(ROOT / "tiny_neck.json")
    ins = {lv: rng.standard_normal(dims).astype(np.float32) for lv, dims in g.inputs.items()}
    for lv, t in ins.items():
        save(f"neck_{lv}", t)
    for name, t in bifpn.graph_execute(g, ins).items():
        save(f"neck_out_{name}", t)


if __name__ == "__main__":
    write_eval()
    write_tensors()
