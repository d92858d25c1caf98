import init, { spectrum, heat_solution_1d, bermudan_partial_sums } from "./pkg/pdexpand_demo.js";

const num = (id) => Number(document.getElementById(id).value);
const out = (id, text) => { document.getElementById(id).textContent = text; };

// Draw series of [x, y] points; `logY` plots log10(y).
function plot(id, series, logY = false) {
  const c = document.getElementById(id);
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const tf = (y) => (logY ? Math.log10(y) : y);
  const pts = series.flatMap((s) => s.points).filter(([, y]) => !logY || y > 0);
  if (pts.length === 0) return;
  const xs = pts.map((p) => p[0]);
  const ys = pts.map((p) => tf(p[1]));
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const pad = 30;
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (c.width - 2 * pad);
  const sy = (y) => c.height - pad - ((tf(y) - y0) / (y1 - y0 || 1)) * (c.height - 2 * pad);
  for (const s of series) {
    g.strokeStyle = s.color;
    g.fillStyle = s.color;
    g.beginPath();
    s.points.forEach(([x, y], i) => {
      if (logY && y <= 0) return;
      if (s.dots) g.fillRect(sx(x) - 2, sy(y) - 2, 4, 4);
      else if (i === 0) g.moveTo(sx(x), sy(y));
      else g.lineTo(sx(x), sy(y));
    });
    if (!s.dots) g.stroke();
  }
}

function runSpectrum() {
  const ev = spectrum(num("sp-n"), num("sp-phi"), num("sp-vol"));
  plot("sp-plot", [{ color: "#1f77b4", dots: true, points: Array.from(ev, (v, i) => [i + 1, v]) }], true);
  out("sp-out", Array.from(ev.slice(0, 5), (v, i) => `lambda_${i + 1} = ${v.toPrecision(6)}`).join("\n"));
}

function runHeat() {
  const r = heat_solution_1d(num("ht-lambda"), num("ht-tau"), num("ht-j"), num("ht-steps"), 161);
  const z = r.z, a = r.numeric, b = r.exact;
  plot("ht-plot", [
    { color: "#aaa", points: Array.from(z, (x, i) => [x, b[i]]) },
    { color: "#d62728", dots: true, points: Array.from(z, (x, i) => [x, a[i]]).filter((_, i) => i % 8 === 0) },
  ]);
  out("ht-out", `max |numeric - exact| = ${r.max_error().toExponential(3)}`);
  r.free();
}

function runPartialSums() {
  out("ps-out", "solving...");
  setTimeout(() => {
    const t = performance.now();
    const p = bermudan_partial_sums(num("ps-n"), num("ps-k"), num("ps-j"), 10);
    plot("ps-plot", [{ color: "#2ca02c", dots: true, points: Array.from(p, (v, i) => [i + 1, v]) }]);
    const lines = Array.from(p, (v, i) => `k = ${String(i + 1).padStart(2)}  ${v.toFixed(2)} bp`);
    lines.push(`(${((performance.now() - t) / 1000).toFixed(1)} s)`);
    out("ps-out", lines.join("\n"));
  }, 0);
}

await init();
document.getElementById("sp-run").onclick = runSpectrum;
document.getElementById("ht-run").onclick = runHeat;
document.getElementById("ps-run").onclick = runPartialSums;
runSpectrum();
runHeat();
