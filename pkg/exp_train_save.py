import numpy as np, time
import exp_train as E
from eqservo import autodiff as ad
from eqservo import model as M

model = E.run(size=24, n_views=400, th=(192,192),
              schedule=((3e-3,40),(1.5e-3,60),(7e-4,60)), geodesic_extras=8, augment=True)
ad.save_checkpoint("/tmp/toy_model.ckpt", model.params, {"config": "exp24"})
import json
open("/tmp/toy_model_cfg.json","w").write(json.dumps(model.config.to_dict()))
print("saved")
