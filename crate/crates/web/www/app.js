import init, { filterDemo, rectifyDemo, reliabilityDemo } from "./pkg/fgr_web.js";

const SIZE = 32;
const BINS = 15;
const $ = (id) => document.getElementById(id);

function drawImage(canvas, rgba) {
  const small = new OffscreenCanvas(SIZE, SIZE);
  small.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), SIZE, SIZE), 0, 0);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(small, 0, 0, canvas.width, canvas.height);
}

// Two 8x8 heat maps of log energy, before and after.
function drawSpectra(canvas, before, after) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const cell = 16;
  const all = [...before, ...after].filter((e) => e > 0).map(Math.log10);
  const lo = Math.min(...all), hi = Math.max(...all);
  [before, after].forEach((spec, k) => {
    for (let u = 0; u < 8; u++) {
      for (let v = 0; v < 8; v++) {
        const e = spec[u * 8 + v];
        const t = e > 0 ? (Math.log10(e) - lo) / (hi - lo || 1) : 0;
        ctx.fillStyle = `hsl(${240 - 240 * t}, 80%, ${15 + 45 * t}%)`;
        ctx.fillRect(k * 144 + v * cell, u * cell, cell, cell);
      }
    }
  });
}

function updateFilter() {
  const lambda = Number($("lambda").value);
  $("lambda-value").textContent = lambda;
  const r = filterDemo(Number($("pattern").value), SIZE, lambda);
  drawImage($("original"), r.original());
  drawImage($("filtered"), r.filtered());
  drawSpectra($("spectrum"), r.spectrum_before(), r.spectrum_after());
  const before = r.high_before(), after = r.high_after();
  const drop = before > 0 ? (100 * (1 - after / before)).toFixed(1) : "n/a";
  $("filter-readout").textContent =
    `high-band energy (u+v ≥ 8): ${before.toFixed(2)} → ${after.toFixed(2)}  (reduction ${drop}%)`;
  r.free();
}

const vectors = { main: [120, 40], calib: [-60, 110] };
let dragging = null;

function arrow(ctx, [x, y], color) {
  const [ox, oy] = [200, 200];
  ctx.strokeStyle = ctx.fillStyle = color;
  ctx.lineWidth = 3;
  ctx.beginPath();
  ctx.moveTo(ox, oy);
  ctx.lineTo(ox + x, oy - y);
  ctx.stroke();
  ctx.beginPath();
  ctx.arc(ox + x, oy - y, 5, 0, 2 * Math.PI);
  ctx.fill();
}

function updateRectify() {
  const canvas = $("rectify");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#ddd";
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.moveTo(0, 200); ctx.lineTo(400, 200); ctx.moveTo(200, 0); ctx.lineTo(200, 400);
  ctx.stroke();
  const [m, c] = [vectors.main, vectors.calib];
  const [fx, fy, conflicted, cos] = rectifyDemo(m[0], m[1], c[0], c[1]);
  arrow(ctx, c, "#e67e22");
  arrow(ctx, m, "#2e86de");
  arrow(ctx, [fx, fy], "#27ae60");
  const align = fx * c[0] + fy * c[1];
  $("rectify-readout").textContent =
    `cos(g_main, g_calib) = ${cos.toFixed(3)}  ${conflicted ? "conflict → projected" : "no conflict → unchanged"}  g_final·g_calib = ${align.toFixed(3)}`;
}

function canvasPoint(e) {
  const rect = $("rectify").getBoundingClientRect();
  return [e.clientX - rect.left - 200, 200 - (e.clientY - rect.top)];
}

function setupRectify() {
  const canvas = $("rectify");
  canvas.addEventListener("pointerdown", (e) => {
    const p = canvasPoint(e);
    const dist = (v) => Math.hypot(v[0] - p[0], v[1] - p[1]);
    dragging = dist(vectors.main) <= dist(vectors.calib) ? "main" : "calib";
    vectors[dragging] = p;
    updateRectify();
  });
  canvas.addEventListener("pointermove", (e) => {
    if (dragging) {
      vectors[dragging] = canvasPoint(e);
      updateRectify();
    }
  });
  window.addEventListener("pointerup", () => (dragging = null));
}

let fittedT = 1;

function updateReliability() {
  const sharpness = Number($("sharpness").value);
  const temperature = Number($("temperature").value);
  $("sharpness-value").textContent = sharpness.toFixed(1);
  $("temperature-value").textContent = temperature.toFixed(2);
  const out = reliabilityDemo(2000, sharpness, temperature, 1n);
  const [ece, acc, best] = out;
  fittedT = best;
  const canvas = $("reliability");
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, bw = w / BINS;
  ctx.clearRect(0, 0, w, h);
  for (let b = 0; b < BINS; b++) {
    const [conf, accuracy, count] = out.slice(3 + 3 * b, 6 + 3 * b);
    if (count === 0) continue;
    ctx.fillStyle = "#2e86de";
    ctx.fillRect(b * bw + 1, h - accuracy * h, bw - 2, accuracy * h);
    ctx.strokeStyle = "#c0392b";
    ctx.strokeRect(b * bw + 1, h - conf * h, bw - 2, 1);
  }
  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.moveTo(0, h); ctx.lineTo(w, 0);
  ctx.stroke();
  $("reliability-readout").textContent =
    `accuracy ${acc.toFixed(3)}  ECE ${ece.toFixed(4)}  fitted T* ${best.toFixed(2)} (bars: bin accuracy, red ticks: mean confidence)`;
}

await init();
$("pattern").addEventListener("change", updateFilter);
$("lambda").addEventListener("input", updateFilter);
$("sharpness").addEventListener("input", updateReliability);
$("temperature").addEventListener("input", updateReliability);
$("best").addEventListener("click", () => {
  $("temperature").value = fittedT;
  updateReliability();
});
setupRectify();
updateFilter();
updateRectify();
updateReliability();
