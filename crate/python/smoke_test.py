"""Smoke test for the Python bindings.

Builds the extension with cargo, loads it from a temporary directory and
exercises every exported type once. Exits non-zero on the first failure.
"""

import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "convexctrl-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    lib = os.path.join(target, "release", "libconvexctrl_py.so")
    dest = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(dest, "convexctrl.so"))
    sys.path.insert(0, dest)
    import convexctrl

    return convexctrl


def main():
    cc = load()

    bang = cc.Scenario.bang()
    res = bang.optimize(init=[1, 1, 1, 1], damping=1.0)
    assert res["indices"] == [0, 0, 0, 0], res["indices"]
    assert res["converged"]
    assert res["trajectory"].total_cost < 1e-6
    print("bang sweep:", res["status"])

    steer = cc.Scenario.steering()
    traj = steer.simulate()
    assert len(traj.times()) == steer.steps + 1
    assert traj.max_violation() <= 1e-12
    print(f"steering: zero-control cost {traj.total_cost:.6f}")

    a = cc.Ensemble("simplex", 1, 2, [([0.0], [0.5, 0.5]), ([1.0], [1.0, 0.0])])
    b = cc.Ensemble("simplex", 1, 2, [([1.0], [1.0, 0.0]), ([0.0], [0.5, 0.5])])
    assert a.w1(b) == 0.0 and cc.w1_distance(a, b) == 0.0
    try:
        cc.Ensemble("simplex", 1, 2, [([0.0], [0.7, 0.7])])
    except ValueError:
        pass
    else:
        raise AssertionError("an infeasible label was accepted")

    for family in ["leader_follower", "replicator"]:
        r = cc.fd_check_cdiff(family, trials=20, seed=1)
        m = cc.fd_check_mugrad(family, trials=20, seed=1)
        assert r["passed"] and m["passed"], (r["failures"], m["failures"])
        print(f"{family}: cdiff worst {r['worst_error']:.2e}, mugrad min slope {m['min_slope']:.3f}")

    sc = cc.Scenario.from_config('[model]\nfamily = "replicator"\n[grid]\nsteps = 20\n', particles=4)
    assert len(sc.initial_ensemble()) == 4
    try:
        cc.Scenario.from_config("[model.leader_follower]\ng1 = [0.0, 0.9]\n")
    except ValueError as e:
        assert "g1" in str(e)
    else:
        raise AssertionError("invalid g1 was accepted")

    out = tempfile.mkdtemp()
    cfg = os.path.join(out, "config.toml")
    with open(cfg, "w") as f:
        f.write("[grid]\nsteps = 10\n[ensemble]\nparticles = 4\n")
    assert cc.run("simulate", cfg, out) == 0
    assert os.path.exists(os.path.join(out, "trajectory.csv"))
    print("smoke test passed")


if __name__ == "__main__":
    main()
