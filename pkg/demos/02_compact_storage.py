"""The interleaved storage format, element by element.

Four 4x4 stage matrices at lane width 2: elements (i, l) of stages 0 and 1
sit at adjacent addresses so one vector instruction advances both stages;
stages 2 and 3 form the second block.
"""

import numpy as np

from ocpqp.compact import CompactBatch, batch_gemm, batch_potrf, identity_batch, pack, unpack

rng = np.random.default_rng(0)
mats = [rng.integers(10, 100, (4, 4)).astype(float) for _ in range(4)]
batch = pack(mats, d=2)

print("flat buffer, first 8 entries:")
print(" ", batch.data[:8])
print("  (A0)_00, (A1)_00 =", mats[0][0, 0], mats[1][0, 0], "-> adjacent")
print("  (A0)_10, (A1)_10 =", mats[0][1, 0], mats[1][1, 0], "-> next pair")

addr = lambda i, l, j: ((j // 2) * 16 + l * 4 + i) * 2 + (j % 2)
print("\nflat-index formula ((j//d)*cols*rows + l*rows + i)*d + j%d:")
for (i, l, j) in ((0, 0, 0), (0, 0, 1), (0, 0, 2), (2, 3, 3)):
    k = addr(i, l, j)
    print(f"  element ({i},{l}) of stage {j} -> offset {k}: "
          f"{batch.data[k]} == {mats[j][i, l]}")

# round trip is exact
out = unpack(batch, 4)
print("\nround-trip bit-exact:", all(np.array_equal(a, b) for a, b in zip(mats, out)))

# kernels process all lanes of a block in lock step
spd = pack([m @ m.T + 40 * np.eye(4) for m in mats], d=2)
chol = batch_potrf(spd)
recon_err = max(
    np.max(np.abs(chol.stage(j) @ chol.stage(j).T - spd.stage(j))) for j in range(4)
)
print(f"batched Cholesky reconstruction error: {recon_err:.2e}")

prod = CompactBatch(4, 4, batch.nblocks, 2)
batch_gemm(1.0, batch, False, identity_batch(4, batch.nblocks, 2), False, 0.0, prod)
print("gemm with identity reproduces inputs:",
      all(np.allclose(prod.stage(j), mats[j]) for j in range(4)))
