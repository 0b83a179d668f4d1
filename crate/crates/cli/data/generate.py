"""Writes the bundled synthetic weekly panel (9 units, 98 + 48 weeks).

Israel-Palestine has a direct effect of 20 and Jordan an interference effect
of 8 from week 99 on; the other units are unaffected.
"""
import datetime as dt

import numpy as np

seed, out = 2, "middle_east_synthetic.csv"
rng = np.random.default_rng(seed)
units = ["Israel-Palestine","Jordan","Iran","Lebanon","Saudi Arabia","Bahrain","Turkey","Iraq","Yemen"]
start = dt.date(2015,12,28)
weeks = [start + dt.timedelta(weeks=k) for k in range(149) if k not in (28,29,30)]
T, T0 = len(weeks), 98
level = np.array([60,25,35,30,40,45,90,150,120.0])
lam = np.array([[8,3],[4,2],[6,4],[5,3],[4,7],[7,4],[10,5],[20,8],[12,18.0]])
f = np.zeros((T+100,2)); e = np.zeros((T+100,9))
for t in range(2,T+100):
    f[t] = 0.2*f[t-1] + 0.1*f[t-2] + rng.standard_normal(2)
    e[t] = 0.2*e[t-1] + 0.1*e[t-2] + rng.standard_normal(9)
f, e = f[100:], e[100:]
shift = np.array([1.0, -0.5])
sd = np.array([3,1.5,3,2,3,3,4,6,6.0])
y = np.zeros((T,9))
for t in range(T):
    post = t >= T0
    y[t] = level + lam @ (f[t] + (shift if post else 0)) + sd*e[t]
    if post:
        y[t,0] += 20; y[t,1] += 8
y = np.maximum(np.round(y), 0)
with open(out,"w") as fh:
    fh.write("week," + ",".join(units) + "\n")
    for w,row in zip(weeks,y):
        fh.write(w.isoformat()+","+",".join(str(int(v)) for v in row)+"\n")
