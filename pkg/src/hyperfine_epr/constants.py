"""Physical constants, all in the frequency units used throughout the package (MHz, mT, K)."""

# Bohr magneton over Planck constant (CODATA 2018), MHz per mT.
MU_B_MHZ_PER_MT = 13.996244936

# h / k_B expressed per MHz: an energy of 1 MHz corresponds to this many kelvin.
KELVIN_PER_MHZ = 4.799243e-5

# DPPH field marker, isotropic g.
DPPH_G = 2.0037

# Free-ion Er3+ 4I15/2 hyperfine constant and Lande factor for the A/g symmetry rule.
A_J_MHZ = -125.3
G_J = 6.0 / 5.0
