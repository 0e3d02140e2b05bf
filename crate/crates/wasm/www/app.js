// Plain ES module; expects the wasm-bindgen `--target web` output in ./pkg.
import init, { scheduleCurves, routeToken, patternCounts } from "./pkg/dynamoe_wasm.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#555", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

function call(fn, errorEl, ...args) {
  try {
    errorEl.textContent = "";
    return JSON.parse(fn(...args));
  } catch (e) {
    errorEl.textContent = e.message ?? String(e);
    return null;
  }
}

function clear(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.font = "12px system-ui";
  return ctx;
}

// --- schedules -------------------------------------------------------------

function drawSchedules() {
  const data = call(scheduleCurves, $("s-error"), +$("s-max").value, +$("s-min").value, +$("s-layers").value);
  if (!data) return;
  const sel = $("s-kind");
  if (sel.options.length === 0) {
    data.kinds.forEach((k) => sel.add(new Option(k.kind, k.kind)));
    sel.value = "descending";
  }
  const canvas = $("s-canvas");
  const ctx = clear(canvas);
  const pad = 32, w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  const x = (t) => pad + t * w;
  const y = (v) => pad + h - (data.n_max === 0 ? 0 : (v / data.n_max) * h);

  ctx.strokeStyle = "#ccc";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#666";
  ctx.fillText(String(data.n_max), 4, y(data.n_max) + 4);
  ctx.fillText("0", 4, y(0) + 4);
  ctx.fillText("input", pad, canvas.height - 8);
  ctx.fillText("output", pad + w - 36, canvas.height - 8);

  data.kinds.forEach((k, i) => {
    const active = k.kind === sel.value;
    ctx.strokeStyle = COLORS[i];
    ctx.globalAlpha = active ? 1 : 0.25;
    ctx.lineWidth = active ? 2.5 : 1;
    ctx.beginPath();
    k.curve.forEach(([t, v], j) => (j ? ctx.lineTo(x(t), y(v)) : ctx.moveTo(x(t), y(v))));
    ctx.stroke();
    if (active) {
      ctx.fillStyle = COLORS[i];
      k.positions.forEach((t, j) => {
        ctx.beginPath();
        ctx.arc(x(t), y(k.counts[j]), 4, 0, 2 * Math.PI);
        ctx.fill();
        ctx.fillText(String(k.counts[j]), x(t) + 6, y(k.counts[j]) - 6);
      });
    }
  });
  ctx.globalAlpha = 1;

  const rows = data.kinds
    .map((k) => `<tr class="${k.kind === sel.value ? "hl" : ""}"><td>${k.kind}</td><td>${k.counts.join(" ")}</td><td>${k.total}</td></tr>`)
    .join("");
  $("s-table").innerHTML = `<tr><th>schedule</th><th>experts per layer</th><th>total</th></tr>${rows}`;
}

// --- routing ---------------------------------------------------------------

let logits = [2.0, 1.0, 0.5, 0.1, -1.0, 0.0, 0.3, 1.5];

function buildSliders() {
  const n = Math.max(1, Math.min(16, +$("r-n").value || 1));
  while (logits.length < n) logits.push(0);
  logits = logits.slice(0, n);
  $("r-sliders").innerHTML = logits
    .map((v, i) => `<label>e${i} <input type="range" min="-4" max="4" step="0.1" value="${v}" data-i="${i}"></label>`)
    .join("");
  $("r-sliders").querySelectorAll("input").forEach((el) =>
    el.addEventListener("input", () => {
      logits[+el.dataset.i] = +el.value;
      drawRouting();
    }),
  );
}

function drawRouting() {
  $("r-tau-out").textContent = (+$("r-tau").value).toFixed(2);
  $("r-temp-out").textContent = (+$("r-temp").value).toFixed(1);
  const r = call(routeToken, $("r-error"), JSON.stringify(logits), +$("r-tau").value, +$("r-temp").value, +$("r-k").value);
  if (!r) return;
  const canvas = $("r-canvas");
  const ctx = clear(canvas);
  const pad = 28, n = r.gates.length;
  const bw = (canvas.width - 2 * pad) / n;
  const h = canvas.height - 2 * pad;
  const top = Math.max(...r.gates, 1e-9);
  const y = (v) => pad + h - (v / top) * h;

  r.gates.forEach((g, i) => {
    const dyn = r.dynamic.indices.indexOf(i);
    const fixed = r.topk.indices.includes(i);
    ctx.fillStyle = dyn >= 0 ? "#d62728" : "#bbb";
    ctx.fillRect(pad + i * bw + 4, y(g), bw - 8, pad + h - y(g));
    if (fixed) {
      ctx.strokeStyle = "#1f77b4";
      ctx.lineWidth = 2;
      ctx.strokeRect(pad + i * bw + 2, y(g) - 2, bw - 4, pad + h - y(g) + 2);
    }
    ctx.fillStyle = "#333";
    ctx.fillText(`e${i}`, pad + i * bw + bw / 2 - 8, canvas.height - 8);
    ctx.fillText(g.toFixed(3), pad + i * bw + 4, y(g) - 4);
    if (dyn >= 0) ctx.fillText(`w=${r.dynamic.weights[dyn].toFixed(2)}`, pad + i * bw + 4, y(g) + 14);
  });
  if (r.dynamic.threshold !== null) {
    ctx.strokeStyle = "#d62728";
    ctx.setLineDash([5, 4]);
    ctx.beginPath();
    ctx.moveTo(pad, y(r.dynamic.threshold));
    ctx.lineTo(canvas.width - pad, y(r.dynamic.threshold));
    ctx.stroke();
    ctx.setLineDash([]);
  }
  const thr = r.dynamic.threshold === null ? "-inf" : r.dynamic.threshold.toFixed(4);
  $("r-summary").innerHTML =
    `K<sub>max</sub> = ${r.k_max}, threshold &theta; = ${thr}. ` +
    `<span style="color:#d62728">Dynamic</span> picks [${r.dynamic.indices.join(", ")}]; ` +
    `<span style="color:#1f77b4">Top-${r.topk.k}</span> picks [${r.topk.indices.join(", ")}] with raw gate weights ` +
    `summing to ${r.topk.weights.reduce((a, b) => a + b, 0).toFixed(3)}.`;
}

// --- patterns --------------------------------------------------------------

function drawPatterns() {
  const p = call(patternCounts, $("p-error"), +$("p-n").value, +$("p-tau").value, +$("p-k").value);
  if (!p) return;
  $("p-summary").textContent =
    `n=${p.n} τ=${p.tau} K_max=${p.k_max}: dynamic=${p.dynamic} fixed(K=${p.k_fixed})=${p.fixed} ` +
    `ratio≈${p.ratio.toFixed(2)} bound=${p.lower_bound.toFixed(1)}`;
  const canvas = $("p-canvas");
  const ctx = clear(canvas);
  const pad = 28, n = p.series.length;
  const bw = (canvas.width - 2 * pad) / n;
  const h = canvas.height - 2 * pad;
  // log scale; counts arrive as decimal strings
  const log = (s) => Math.log10(Number(s));
  const top = Math.max(...p.series.map((s) => log(s.dynamic)), 1);
  const y = (v) => pad + h - (v / top) * h;
  p.series.forEach((s, i) => {
    const x0 = pad + i * bw;
    ctx.fillStyle = s.k <= p.k_max ? "#d62728" : "#f2b8b8";
    ctx.fillRect(x0 + 1, y(log(s.dynamic)), bw / 2 - 1, pad + h - y(log(s.dynamic)));
    ctx.fillStyle = s.k === p.k_fixed ? "#1f77b4" : "#aac8e4";
    ctx.fillRect(x0 + bw / 2, y(log(s.fixed)), bw / 2 - 1, pad + h - y(log(s.fixed)));
    if (n <= 16) {
      ctx.fillStyle = "#333";
      ctx.fillText(String(s.k), x0 + bw / 2 - 4, canvas.height - 8);
    }
  });
  ctx.fillStyle = "#333";
  ctx.fillText("log10 count; red = dynamic (Σ C(n,k) up to k), blue = fixed C(n,k)", pad, 16);
}

// --- wiring ----------------------------------------------------------------

await init();
["s-max", "s-min", "s-layers", "s-kind"].forEach((id) => $(id).addEventListener("input", drawSchedules));
["r-tau", "r-temp", "r-k"].forEach((id) => $(id).addEventListener("input", drawRouting));
$("r-n").addEventListener("input", () => {
  buildSliders();
  drawRouting();
});
$("r-shuffle").addEventListener("click", () => {
  logits = logits.map(() => Math.round((Math.random() * 8 - 4) * 10) / 10);
  buildSliders();
  drawRouting();
});
["p-n", "p-tau", "p-k"].forEach((id) => $(id).addEventListener("input", drawPatterns));

drawSchedules();
buildSliders();
drawRouting();
drawPatterns();
