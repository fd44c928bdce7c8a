"""Smoke test for the windscale Python bindings.

Run after `maturin develop -m crates/python/Cargo.toml`, or directly: when the
module is not installed the script builds the extension with cargo and loads it
from the target directory.
"""

import importlib.util
import json
import math
import pathlib
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load_module():
    try:
        import windscale_py

        return windscale_py
    except ImportError:
        pass
    subprocess.run(["cargo", "build", "-p", "windscale-py"], cwd=ROOT, check=True)
    lib = ROOT / "target" / "debug" / "libwindscale_py.so"
    spec = importlib.util.spec_from_file_location("windscale_py", lib)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    ws = load_module()

    field = ws.gen_synthetic(json.dumps({"n_lat": 16, "n_lon": 16, "steps": 16, "seed": 3}))
    assert field.shape == [16, 3, 16, 16], field.shape
    assert field.channels == ["u", "v", "orog"]

    # radial power sums to the plane variance
    plane = field.plane(0, 0)
    mean = sum(plane) / len(plane)
    var = sum((v - mean) ** 2 for v in plane) / len(plane)
    power = field.radial_spectrum(0, 0)
    assert math.isclose(sum(power), var, rel_tol=1e-4), (sum(power), var)

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "f.grd"
        field.save(str(path))
        back = ws.Field.load(str(path))
        assert back.values() == field.values()

    # solid-body rotation has vorticity 2 everywhere
    n = 8
    u = [-(i - 3.5) for i in range(n) for _ in range(n)]
    v = [j - 3.5 for _ in range(n) for j in range(n)]
    rot = ws.Field([1, 2, n, n], u + v, ["u", "v"])
    assert all(abs(z - 2.0) < 1e-6 for z in rot.vorticity(periodic=False))

    sig = ws.noise_levels(18)
    assert len(sig) == 19 and sig[-1] == 0.0 and math.isclose(sig[0], 80.0)
    assert ws.member_seed(0, 0) != ws.member_seed(0, 1)

    cfg = ws.resolve_config("{}")
    assert cfg["pairs"]["t_in"] == 4
    try:
        ws.resolve_config('{"nope": 1}')
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass

    report = ws.storm_count(field, threshold=10.0)
    assert report["events"] == []
    assert ws.ks_distance([0.0, 1.0], [0.0, 1.0]) == 0.0

    print("python smoke ok")


if __name__ == "__main__":
    sys.exit(main())
