"""Reference values produced by the direct piecewise-constant search oracle.

Each entry is ``(scenario, x0, t) -> (cost with 8 steps, cost with 32 steps)``.
The sequence 8 -> 16 -> 32 steps decreases monotonically with second-order
increments, so the 32-step value is within 1e-6 of the continuous optimum.
Running cost is zero; the terminal cost is the scenario's Gaussian bump.
"""

ORACLE_COSTS = {
    ("grushin-sin-decoupled", (1.0, 0.0), 0.0): (-0.219590872265214, -0.21959811234204848),
    ("grushin-sin-decoupled", (0.0, 0.0), 0.0): (-0.1630003676369978, -0.16300329113213546),
    ("grushin-sin-decoupled", (-0.5, 0.4), 0.3): (-0.14095941172517806, -0.14096066858454614),
    ("grushin-sigmoid-decoupled", (1.0, 0.0), 0.0): (-0.20298820626860015, -0.20299080607924946),
    ("grushin-sigmoid-decoupled", (0.0, 0.0), 0.0): (-0.1629914286618806, -0.16299428713457936),
    ("grushin-sigmoid-decoupled", (-0.5, 0.4), 0.3): (-0.14078120576598174, -0.14078220200500527),
}
