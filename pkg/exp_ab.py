import sys

import exp_train as E

variant = sys.argv[1]
kw = dict(size=24, n_views=400, th=(192, 192), schedule=((3e-3, 40), (1.5e-3, 60)))
if variant == "A":
    pass
elif variant == "B":
    kw.update(augment=True)
elif variant == "C":
    kw.update(geodesic_extras=8)
elif variant == "D":
    kw.update(geodesic_extras=8, augment=True)
E.run(**kw)
