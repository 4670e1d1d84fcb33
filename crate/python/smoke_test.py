"""Smoke test for the latent_dml extension module.

Build and install first:

    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install --no-build-isolation dist/latent_dml-*.whl
"""

import math

import latent_dml


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok   {msg}")


def main():
    check("figure3-positive" in latent_dml.PRESETS, "presets exposed")

    mean, second = latent_dml.truncated_normal_moments(0.0, 1.0)
    check(abs(mean - math.sqrt(2 / math.pi)) < 1e-12, "half-normal mean")
    check(second >= mean * mean, "truncated second moment")
    check(abs(math.exp(latent_dml.emg_log_density(0.0, 0.0, 1.0, 1.0)) - 0.26158) < 1e-5, "emg density")
    check(latent_dml.bic(-10.0, 3, 100) == 20.0 + 3 * math.log(100), "bic formula")

    scen = latent_dml.Scenario.preset("figure3-positive")
    inst = scen.generate(seed=3)
    check(len(inst["y"]) == 300 and len(inst["x"][0]) == 100, "generated shape")

    res = latent_dml.Residuals.cross_fit(inst["y"], inst["d"], inst["x"], seed=1)
    check(len(res) == 300, "residual length")
    dml = res.pooled_theta()
    conf = res.fit("confounder_latent", seed=1)
    check(abs(conf["theta_final"] - 1.0) < abs(dml - 1.0), "confounder model beats plain dml")

    sel = latent_dml.estimate(inst["y"], inst["d"], inst["x"], model="auto", seed=1)
    check(sel["chosen"] in ("outcome_latent", "confounder_latent"), f"selection picked {sel['chosen']}")

    try:
        latent_dml.Scenario.preset("bogus")
    except ValueError as e:
        check("figure2-outcome" in str(e), "bad preset raises ValueError")
    else:
        check(False, "bad preset raises ValueError")

    small = latent_dml.Scenario("confounder", n=100, d=10)
    a = latent_dml.benchmark(small, methods="dml,confounder_latent", runs=3, seed=5)
    b = latent_dml.benchmark(small, methods="dml,confounder_latent", runs=3, seed=5)
    check(a == b and len(a["runs"]) == 6, "benchmark deterministic")
    print("all checks passed")


if __name__ == "__main__":
    main()
