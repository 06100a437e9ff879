"""Field-unit <-> SI conversion factors.

All internal arithmetic is SI (Pa, m, s, kg, m^3/s). Deck files carry oilfield
units; every conversion happens through the constants below at the I/O
boundary and nowhere else.
"""

PSI = 6894.757293168360          # Pa
FT = 0.3048                      # m
DAY = 86400.0                    # s
BBL = 0.158987294928             # m^3 (42 US gallons)
SCF = 0.028316846592             # m^3 (1 ft^3)
MSCF = 1000.0 * SCF              # m^3
MILLIDARCY = 9.869233e-16        # m^2
CENTIPOISE = 1.0e-3              # Pa*s
LB_PER_FT3 = 16.018463373960142  # kg/m^3
SCF_PER_STB = SCF / BBL          # m^3/m^3, solution gas-oil ratio
RB_PER_MSCF = BBL / MSCF         # m^3/m^3, gas formation volume factor
STB_PER_DAY = BBL / DAY          # m^3/s
MSCF_PER_DAY = MSCF / DAY        # m^3/s

GRAVITY = 9.80665                # m/s^2, depth measured positive downward
