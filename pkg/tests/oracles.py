"""Independent reference computations used to freeze expected values.

Nothing here imports the package; these are the slow, obvious versions.
"""


def gcd(a, b):
    while b:
        a, b = b, a % b
    return abs(a)


def egcd_inverse(a, m):
    """Extended Euclid; returns None when no inverse exists."""
    old_r, r = a % m, m
    old_s, s = 1, 0
    while r:
        q = old_r // r
        old_r, r = r, old_r - q * r
        old_s, s = s, old_s - q * s
    if old_r != 1:
        return None
    return old_s % m


def square_and_multiply(base, exponent, modulus):
    result = 1 % modulus
    base %= modulus
    for bit in bin(exponent)[2:]:
        result = result * result % modulus
        if bit == "1":
            result = result * base % modulus
    return result


def repeated_multiplication(base, exponent, modulus):
    result = 1 % modulus
    for _ in range(exponent):
        result = result * base % modulus
    return result


def units(n):
    return [a for a in range(1, n) if gcd(a, n) == 1]


def trial_division_is_prime(n):
    if n < 2:
        return False
    f = 2
    while f * f <= n:
        if n % f == 0:
            return False
        f += 1
    return True
