"""One-off generator for the checked-in key fixtures (not used at runtime)."""

import random
import sys
from pathlib import Path

from sympy import randprime

OUT = Path(__file__).resolve().parents[1] / "src" / "bitfuzz" / "fixtures" / "keys"


def rsa_keypair(bits: int) -> tuple[int, int, int]:
    e = 65537
    while True:
        p = randprime(1 << (bits // 2 - 1), 1 << (bits // 2))
        q = randprime(1 << (bits // 2 - 1), 1 << (bits // 2))
        n = p * q
        phi = (p - 1) * (q - 1)
        if p != q and n.bit_length() == bits and phi % e:
            return n, e, pow(e, -1, phi)


def main() -> None:
    # randprime draws from sympy's own generator, so only the AES key follows the seed
    random.seed(int(sys.argv[1]) if len(sys.argv) > 1 else 2024)
    for name in ("rsa_right", "rsa_wrong"):
        n, e, d = rsa_keypair(512)
        (OUT / f"{name}.key").write_text(f"e={e:x}\nn={n:x}\nd={d:x}\n")
    aes = random.getrandbits(256)
    (OUT / "aes_test.key").write_text(f"key={aes:064x}\n")


if __name__ == "__main__":
    main()
