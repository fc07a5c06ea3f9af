"""Smoke test for the mzsim Python module.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml
"""

import math

import mzsim


def main():
    params = mzsim.ModelParams(nu=0.5)
    assert dict(params.as_dict())["nu"] == 0.5

    s = mzsim.Scenario("smoke", "C1", 1.0, 3, 1, 1, 1, params)
    s.tail_bound = 0.05
    s.t_end = 1.0
    dim = s.validate()
    print("dim", dim)

    h = s.hamiltonian()
    psi0 = s.initial_state()
    assert abs(psi0.norm() - 1.0) < 1e-12
    e0 = h.energy(psi0)
    psi = h.evolve(psi0, 1.0)
    assert abs(psi.norm() - 1.0) < 1e-9
    assert abs(h.energy(psi) - e0) < 1e-8 * (1 + abs(e0))
    back = h.evolve(psi, -1.0)
    overlap = sum((a.conjugate() * b) for a, b in zip(back.amplitudes(), psi0.amplitudes()))
    assert abs(abs(overlap) - 1.0) < 1e-8

    assert psi0.mutual_information(["signal"], ["idler_A"]) < 1e-9
    print("N2A", psi.occupation("idler_A"), "I(s:iA)", psi.mutual_information(["signal"], ["idler_A"]))
    print("fig8a", h.expectation(psi, "C1", "sz_A * c3 * c2A + h.c."))

    # N_BS2 is a sinusoid in the phase
    vals = [psi.bs2_output(k * math.pi / 4) for k in range(8)]
    a = sum(vals) / 8
    b = sum(v * math.cos(k * math.pi / 4) for k, v in enumerate(vals)) / 4
    c = sum(v * math.sin(k * math.pi / 4) for k, v in enumerate(vals)) / 4
    fit = max(abs(a + b * math.cos(k * math.pi / 4) + c * math.sin(k * math.pi / 4) - v) for k, v in enumerate(vals))
    assert fit < 1e-12, fit

    ts = s.run()
    assert ts.times[0] == 0.0 and abs(ts.times[-1] - 1.0) < 1e-12
    assert ts.to_csv().splitlines()[0].startswith("t,N1A,N1B")
    assert ts.column("N1A")[0] is not None

    again = mzsim.Scenario.from_toml(s.to_toml())
    assert again.to_toml() == s.to_toml()
    assert mzsim.poisson_tail(1.0, 30) < 1e-30
    print("ok")


if __name__ == "__main__":
    main()
