import numpy as np, time, json
from pathlib import Path
from forgefuse.data import gen_dataset, load_dataset, SignalProfile
from forgefuse.model import ModelConfig, FusionModel
from forgefuse.train import TrainRunConfig, train_run, predict_records, expand_stream
from forgefuse.metrics import evaluate, avg_fusion_predict, single_signal_predict

root = Path('/root/pkg/.devprobe')
profiles = [SignalProfile('a', 0.55), SignalProfile('b', 0.65), SignalProfile('c', 0.75)]
t0 = time.time()
if not (root/'train'/'dataset.json').exists():
    gen_dataset(root/'train', 600, profiles, seed=11)
    gen_dataset(root/'test', 150, profiles, seed=12)
train = load_dataset(root/'train'); test = load_dataset(root/'test')
print('data ready', time.time()-t0, flush=True)

def model_predictor(model):
    def p(rec):
        preds = predict_records(model, [rec], batch_size=1)
        return preds[0]
    return p

def run(tag, names, p_drop, seed, epochs=12):
    t0 = time.time()
    cfg = ModelConfig.desk(signal_names=names, p_drop=p_drop)
    m = FusionModel(cfg, seed=seed)
    tc = TrainRunConfig(epochs=epochs, batch_size=32, seed=seed)
    res = train_run(train, m, tc)
    res.restore_best(m)
    preds = predict_records(m, test, 32)
    it = iter(preds)
    rep = evaluate(lambda rec: next(it), sorted(test, key=lambda r: r.name))
    print(f'{tag}: test pixel F1={rep.pixel_f1:.4f} auc={rep.pixel_auc:.4f} img_f1={rep.image_f1:.4f} best_ep={res.best_epoch} val={res.best_val_f1:.4f} [{time.time()-t0:.0f}s]', flush=True)
    return m, rep

rep_avg = evaluate(avg_fusion_predict(['a','b','c']), test)
rep_c = evaluate(single_signal_predict('c'), test)
print(f'baseline avg={rep_avg.pixel_f1:.4f} single_c={rep_c.pixel_f1:.4f}', flush=True)

m_full, rep_full = run('full', ('a','b','c'), 0.2, 0)
_, rep_nosd = run('no_stream_drop', ('a','b','c'), 0.0, 0)
_, rep_nobest = run('no_best_signal', ('a','b'), 0.2, 0)
m2, rep_2sig = run('2sig_base', ('a','b'), 0.2, 0)
t0=time.time()
grown, gres = expand_stream(m2, train, 'c', 'stream_only', TrainRunConfig(epochs=12, batch_size=32, seed=1), base_epochs=12)
gres.restore_best(grown)
preds = predict_records(grown, test, 32)
it = iter(preds)
rep_exp = evaluate(lambda rec: next(it), sorted(test, key=lambda r: r.name))
print(f'expanded stream_only: F1={rep_exp.pixel_f1:.4f} vs scratch {rep_full.pixel_f1:.4f} ratio={rep_exp.pixel_f1/max(rep_full.pixel_f1,1e-9):.3f} [{time.time()-t0:.0f}s]', flush=True)
print('SUMMARY', json.dumps({'avg': rep_avg.pixel_f1, 'single_c': rep_c.pixel_f1, 'full': rep_full.pixel_f1, 'nosd': rep_nosd.pixel_f1, 'nobest': rep_nobest.pixel_f1, 'expanded': rep_exp.pixel_f1}), flush=True)
