"""Smoke test for the Python bindings.

Builds the extension with cargo unless OCO_RG_LIB points at a built library,
copies it next to a temporary package path as `oco_rg`, and exercises the API.
"""

import importlib
import json
import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def built_library() -> Path:
    env = os.environ.get("OCO_RG_LIB")
    if env:
        return Path(env)
    subprocess.run(
        ["cargo", "build", "-p", "oco-rg-py", "--release", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
    for name in ("liboco_rg_py.so", "liboco_rg_py.dylib", "oco_rg_py.dll"):
        if (target / name).exists():
            return target / name
    raise FileNotFoundError(f"no extension library in {target}")


def import_module(lib: Path, where: Path):
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy(lib, where / f"oco_rg{suffix}")
    sys.path.insert(0, str(where))
    return importlib.import_module("oco_rg")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        m = import_module(built_library(), Path(tmp))

        c, u = m.reactor_steady_state(0.6519)
        assert abs(c - 0.2632) < 1e-3, c
        nxt = m.reactor_step([c, 0.6519], u)
        assert max(abs(a - b) for a, b in zip(nxt, [c, 0.6519])) < 1e-9

        scn = m.Scenario.load(ROOT / "configs" / "cstr.toml").with_overrides(horizon=300)
        assert scn.horizon == 300
        run = scn.simulate()
        assert run.steps == 300 and run.violations == 0
        assert math.isfinite(run.regret) and run.path_length >= 0.0
        assert len(run.states()) == 300 and len(run.governed()) == 300
        report = json.loads(run.report_json())
        assert report["regret"]["violations"] == 0
        csv = Path(tmp) / "traj.csv"
        run.to_csv(csv)
        assert len(csv.read_text().splitlines()) == 301

        ss = scn.safe_set("fixed")
        h = ss.steady_state(0.6)
        assert ss.contains(h, 0.6) and ss.lyapunov(h, 0.6) == 0.0
        v, beta = ss.govern(h, 0.61, 0.6)
        assert 0.6 <= v <= 0.61 and 0.0 <= beta <= 1.0
        assert ss.contains(h, v)

        try:
            scn.with_overrides(governor="nonsense")
        except ValueError:
            pass
        else:
            raise AssertionError("bad governor accepted")
        try:
            m.Scenario.from_toml("[run]\nhorizon = 'x'\n")
        except ValueError as e:
            assert "line 2" in str(e)
        else:
            raise AssertionError("malformed config accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
