import init, { solver_traces, convergence_bound, rec_histogram } from "./pkg/gpcs_web.js";

const num = (id) => Number(document.getElementById(id).value);
const shared = () => [num("n"), num("k"), num("m"), num("seed")];

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
}

// Log-scale line plot of several series sharing an x axis.
function plotLog(canvas, series) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 36;
  axes(ctx, w, h, pad);
  const vals = series.flatMap((s) => s.data).filter((v) => v > 0 && isFinite(v));
  if (!vals.length) return;
  const lo = Math.log10(Math.min(...vals));
  const hi = Math.log10(Math.max(...vals));
  const span = Math.max(hi - lo, 1e-9);
  const len = Math.max(...series.map((s) => s.data.length));
  const x = (i) => pad + ((w - 2 * pad) * i) / Math.max(len - 1, 1);
  const y = (v) => h - pad - ((h - 2 * pad) * (Math.log10(Math.max(v, 10 ** lo)) - lo)) / span;
  ctx.fillStyle = "#555";
  ctx.fillText(`1e${hi.toFixed(1)}`, 2, pad);
  ctx.fillText(`1e${lo.toFixed(1)}`, 2, h - pad);
  series.forEach((s, j) => {
    ctx.strokeStyle = s.color;
    ctx.setLineDash(s.dash || []);
    ctx.beginPath();
    s.data.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, w - pad - 120, pad + 14 * j);
  });
}

function runTraces() {
  const r = JSON.parse(solver_traces(...shared(), num("outer"), num("inner")));
  plotLog(document.getElementById("traces"), [
    { label: "PGD f(x_n)", data: r.pgd.f, color: "#c33" },
    { label: "NPGD f(x_n)", data: r.npgd.f, color: "#36c" },
  ]);
  const speed = r.pgd.ms_per_image / Math.max(r.npgd.ms_per_image, 1e-6);
  document.getElementById("traces-out").textContent =
    `PGD ${r.pgd.ms_per_image.toFixed(3)} ms/image, NPGD ${r.npgd.ms_per_image.toFixed(3)} ms/image (${speed.toFixed(0)}x)\n` +
    `final MSE: PGD ${r.pgd.mse.at(-1).toExponential(2)}, NPGD ${r.npgd.mse.at(-1).toExponential(2)}`;
}

function runBound() {
  const [n, k, , seed] = shared();
  const r = JSON.parse(convergence_bound(n, k, num("bound-m"), seed, num("bound-outer")));
  const series = [{ label: "NPGD f(x_n)", data: r.f, color: "#36c" }];
  if (r.bound) series.push({ label: "bound", data: r.bound, color: "#393", dash: [4, 3] });
  plotLog(document.getElementById("bound"), series);
  document.getElementById("bound-out").textContent =
    `alpha ${r.alpha.toFixed(4)}, beta ${r.beta.toFixed(4)}, beta/alpha ${r.ratio.toFixed(3)}: ` +
    (r.bound ? (r.holds ? "bound holds" : "bound violated") : "no bound (ratio >= 2)");
}

function runHist() {
  const r = JSON.parse(rec_histogram(...shared(), num("points"), num("bins")));
  const canvas = document.getElementById("hist");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  axes(ctx, w, h, pad);
  const top = Math.max(...r.counts, 1);
  const bw = (w - 2 * pad) / r.counts.length;
  ctx.fillStyle = "#69c";
  r.counts.forEach((c, i) => {
    const bh = ((h - 2 * pad) * c) / top;
    ctx.fillRect(pad + i * bw + 1, h - pad - bh, bw - 2, bh);
  });
  ctx.fillStyle = "#555";
  ctx.fillText(r.edges[0].toFixed(3), pad, h - 10);
  ctx.fillText(r.edges.at(-1).toFixed(3), w - pad - 40, h - 10);
  document.getElementById("hist-out").textContent =
    `${r.pairs} pairs, alpha ${r.alpha.toFixed(4)}, beta ${r.beta.toFixed(4)}, beta/alpha ${(r.beta / r.alpha).toFixed(3)}`;
}

function guard(f, out) {
  return () => {
    try {
      f();
    } catch (err) {
      document.getElementById(out).textContent = String(err);
    }
  };
}

await init();
document.getElementById("run-traces").onclick = guard(runTraces, "traces-out");
document.getElementById("run-bound").onclick = guard(runBound, "bound-out");
document.getElementById("run-hist").onclick = guard(runHist, "hist-out");
runTraces();
runBound();
runHist();
