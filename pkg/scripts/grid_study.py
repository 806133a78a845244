"""Grid and epsilon sensitivity of the default two-state case (K=1.8).

Prints the threshold at three drift estimates and V(2, 1.5) for a few
x-resolutions, then the epsilon study on the default mesh.
"""

import numpy as np

from hmmdiv import hjb, paper_params


def main():
    p = paper_params(1.8)
    print("n_x  n_u  iters  b(1.1)   b(1.5)   b(1.9)   V(2,1.5)")
    for n_x in (100, 200, 400, 800):
        sol = hjb.solve_hjb(p, n_x=n_x)
        b = sol.threshold
        print(f"{n_x:<4} {sol.mesh.us.size - 1:<4} {sol.iterations:<6} "
              + " ".join(f"{b(u):.4f}" for u in (1.1, 1.5, 1.9))
              + f"  {float(sol.value(2.0, 1.5)):.5f}")
    study = hjb.epsilon_refinement_study(p, hjb.default_mesh(p), [1e-2, 5e-3, 2.5e-3, 1.25e-3])
    print("eps differences:", np.array2string(study.differences, precision=3))


if __name__ == "__main__":
    main()
