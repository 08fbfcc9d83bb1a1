"""Record how the damped fixed-point iteration behaves on a model.

Solves one equilibrium per (foresight, root shock, start population) and
prints iterations, final residual and the consistency residuals, so the
effect of damping choices can be compared on the shipped models.

    python scripts/convergence_survey.py capacity --depths 0 1 2 --damping 0.5 1.0
"""
import argparse
import time

import numpy as np

from nbfe.core import uniform_population
from nbfe.equilibrium import SolveConfig, check_consistency, solve_nbfe
from nbfe.models import build_model


def main(argv=None):
    ap = argparse.ArgumentParser(description="damped fixed-point iteration survey")
    ap.add_argument("model", choices=["ks", "capacity", "quality"])
    ap.add_argument("--depths", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--damping", type=float, nargs="+", default=[0.5])
    ap.add_argument("--adaptive", action="store_true")
    ap.add_argument("--starts", type=int, default=3, help="random start populations besides the uniform one")
    ap.add_argument("--eval-sweeps", type=int, default=20)
    ap.add_argument("--max-iter", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    spec = build_model(args.model)
    rng = np.random.default_rng(args.seed)
    starts = [uniform_population(spec.n_states)] + [
        rng.dirichlet(np.ones(spec.n_states)) for _ in range(args.starts)
    ]
    print("N  lam   root start  conv  iters  residual   optimality  population  information  seconds")
    for N in args.depths:
        for lam in args.damping:
            cfg = SolveConfig(
                damping=lam,
                adaptive_damping=args.adaptive,
                damping_floor=min(lam, 1 / 64),
                max_iter=args.max_iter,
                eval_sweeps=args.eval_sweeps,
            )
            for root in range(spec.chain.size):
                for k, s0 in enumerate(starts):
                    t0 = time.time()
                    res = solve_nbfe(root, s0, N, spec, cfg)
                    opt, pop, info = check_consistency(res, spec)
                    print(
                        f"{N}  {lam:<4}  {root}    {k}      {res.converged!s:5} {res.iterations:5}  "
                        f"{res.residual:.2e}   {opt:.2e}    {pop:.2e}    {info:.2e}     {time.time() - t0:.2f}"
                    )


if __name__ == "__main__":
    main()
