import json, sys
import exp_train as E
from eqservo import autodiff as ad

name = sys.argv[1]
if name == "curr":
    model = E.run(size=24, n_views=400, th=(192,192),
                  schedule=((3e-3,40),(1.5e-3,60),(7e-4,60)),
                  geodesic_extras=8, augment=True, aug_from_phase=2)
elif name == "comp":
    model = E.run(size=24, n_views=400, th=(192,192),
                  schedule=((3e-3,40),(1.5e-3,60),(7e-4,60)),
                  geodesic_extras=8, augment=True, aug_from_phase=2,
                  kind="asymmetric-composite")
else:
    model = E.run(size=24, n_views=400, th=(192,192),
                  schedule=((3e-3,40),(1.5e-3,60),(7e-4,60)))
ad.save_checkpoint(f"/tmp/model_{name}.ckpt", model.params, {})
open(f"/tmp/model_{name}_cfg.json","w").write(json.dumps(model.config.to_dict()))
print("saved", name)
