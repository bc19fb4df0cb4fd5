"""A small fixed-seed synth -> train -> map run shared by the CLI tests and the
acceptance suite.

Regenerate the stored map after an intentional numerical change with
``python3 tests/pipeline.py --regen``.
"""

import json
import sys
from pathlib import Path

from ldgnet.cli import run_command

GOLDEN = Path(__file__).parent / "golden" / "target_map.ppm"
SEED = 3
CONFIG = {
    "patch": 5, "widths": [2, 4], "d_sem": 8, "text_layers": 1, "text_width": 16,
    "text_heads": 2, "bpe_merges": 32, "epochs": 1, "batch_size": 64, "seed": SEED,
}


def run(argv) -> None:
    code = run_command([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"ldgnet {argv[0]} exited with {code}")


def synth(out: Path) -> Path:
    run(["synth", "--out", out, "--seed", SEED, "--classes", 3, "--bands", 8])
    return out


def train(scene: Path, out: Path, config: dict = CONFIG) -> Path:
    cfg = out.with_suffix(".cfg.json")
    cfg.write_text(json.dumps(config), encoding="utf-8")
    run([
        "train", "--src", scene / "source.hsic", "--labels", scene / "source.hsil",
        "--meta", scene / "meta.json", "--config", cfg, "--out", out,
    ])
    return out


def render(scene: Path, model: Path, out: Path) -> bytes:
    run(["map", "--model", model, "--tgt", scene / "target.hsic", "--palette", scene / "palette.json", "--out", out])
    return out.read_bytes()


def golden_map(workdir: Path) -> bytes:
    scene = synth(workdir / "scene")
    model = train(scene, workdir / "model.ldgm")
    return render(scene, model, workdir / "map.ppm")


if __name__ == "__main__":
    if sys.argv[1:] != ["--regen"]:
        sys.exit(__doc__)
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_bytes(golden_map(Path(tmp)))
    print(f"wrote {GOLDEN}")
