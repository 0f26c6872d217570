"""Independent reference computations for the shipped scalar problems.

Plain-Python scalar RK4, no code shared with the package. Values frozen
below were produced by these functions (see test_oracles.py, which
recomputes them).
"""

# CP-J1: B=1, Q=1, R=1, G=0, one mark nu=2, beta=0.5, T=1
#   -P' = Q - (B P)^2 / (R + nu beta^2 P),  P(T) = 0
CPJ1_P0 = 0.8063512609673369
# MF-1: scalar, A=0 A1=.5 B=1 B1=.5 C=.5 D=0 Q=Q1=R=R1=G=1, T=1, x0=1
#   fluctuation  -P'  = C^2 P + Q - (B P)^2 / R
#   mean part    -Pi' = 2 (A+A1) Pi + C^2 P + Q + Q1 - ((B+B1) Pi)^2 / (R + R1)
#   optimal cost J = Pi(0) x0^2
MF1_J = 1.887015208626235


def rk4_backward(f, yT, T, n):
    h = T / n
    y = yT
    for _ in range(n):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def cpj1_p0(n=100000, B=1.0, Q=1.0, R=1.0, G=0.0, nu=2.0, beta=0.5, T=1.0):
    return rk4_backward(lambda p: Q - (B * p) ** 2 / (R + nu * beta ** 2 * p), G, T, n)


def cplq1_p(t, T=1.0):
    return 1.0 / (1.0 + T - t)


def mf1_cost(n=20000, T=1.0, x0=1.0):
    A, A1, B, B1, C, Q, Q1, R, R1, G = 0.0, 0.5, 1.0, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0

    def f(y):
        p, pi = y
        dp = C * C * p + Q - (B * p) ** 2 / R
        dpi = 2 * (A + A1) * pi + C * C * p + Q + Q1 - ((B + B1) * pi) ** 2 / (R + R1)
        return (dp, dpi)

    h = T / n
    y = (G, G)
    add = lambda u, v, s: (u[0] + s * v[0], u[1] + s * v[1])
    for _ in range(n):
        k1 = f(y)
        k2 = f(add(y, k1, 0.5 * h))
        k3 = f(add(y, k2, 0.5 * h))
        k4 = f(add(y, k3, h))
        y = (y[0] + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
             y[1] + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
    return y[1] * x0 * x0


if __name__ == "__main__":
    print(repr(cpj1_p0()), repr(mf1_cost()))
