# Independent numpy values frozen into tests/test_ops.cpp and tests/test_train.cpp.
import math
import numpy as np

x = np.array([1.0, 2.0, 3.0])
p = np.exp(x - x.max()) / np.exp(x - x.max()).sum()
print("softmax", p)
print("ce(target=2)", -math.log(p[2]))
ln = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
print("layernorm", ln)
g = np.array([-1.0, 0.0, 0.5])
print("gelu", 0.5 * g * (1 + np.vectorize(math.erf)(g / math.sqrt(2))))


def lr_at(step, lr=1e-4, warm=4000, init=1e-7):
    if step <= warm:
        return init + step / warm * (lr - init)
    return lr * math.sqrt(warm / step)


for s in (1, 2000, 4000, 4001, 16000):
    print("lr_at", s, repr(lr_at(s)))
# Adam, one step, g = 2, lr = 0.1: m = 0.2, v = 0.004, mhat = 2, vhat = 4
print("adam", 1.0 - 0.1 * 2 / (math.sqrt(4) + 1e-8))
