import init, { design, variance_field, filling_distance } from "./pkg/spacefill_web.js";

const canvas = document.getElementById("plot");
const ctx = canvas.getContext("2d");
const stats = document.getElementById("stats");
const HALF = 2;
const RES = 80;

const toPx = (x1, x2) => [
  ((x1 + HALF) / (2 * HALF)) * canvas.width,
  canvas.height - ((x2 + HALF) / (2 * HALF)) * canvas.height,
];

function heatmap(field) {
  const cell = canvas.width / RES;
  for (let i = 0; i < RES; i++) {
    for (let j = 0; j < RES; j++) {
      const v = field[i * RES + j];
      const shade = Math.round(255 - 90 * v);
      ctx.fillStyle = `rgb(${shade},${shade},255)`;
      ctx.fillRect(j * cell, canvas.height - (i + 1) * cell, cell + 1, cell + 1);
    }
  }
}

function dots(flat, color, r) {
  ctx.fillStyle = color;
  for (let i = 0; i < flat.length; i += 2) {
    const [px, py] = toPx(flat[i], flat[i + 1]);
    ctx.beginPath();
    ctx.arc(px, py, r, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function ball(rho, c1, c2) {
  const [px, py] = toPx(c1, c2);
  ctx.strokeStyle = "#2a9d3c";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.arc(px, py, (rho / (2 * HALF)) * canvas.width, 0, 2 * Math.PI);
  ctx.stroke();
}

function run(event) {
  event?.preventDefault();
  const value = (id) => Number(document.getElementById(id).value);
  stats.textContent = "optimizing...";
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const d = design(value("grid"), value("n"), value("ls"), BigInt(value("seed")), value("iters"));
      const ms = performance.now() - t0;
      const opt = d.optimized;
      ctx.clearRect(0, 0, canvas.width, canvas.height);
      heatmap(variance_field(opt, value("ls"), RES));
      dots(d.initial, "#0b6fbf", 3);
      dots(opt, "#d9591f", 4);
      dots(d.anchors, "#000", 5);
      const [rho, c1, c2] = filling_distance(opt);
      ball(rho, c1, c2);
      stats.textContent =
        `epsilon ${d.epsilon.toFixed(3)}   rho initial ${d.rho_initial.toFixed(3)}   ` +
        `rho optimized ${d.rho_optimized.toFixed(3)}   ${d.iterations} iterations in ${ms.toFixed(0)} ms`;
      d.free();
    } catch (err) {
      stats.textContent = `error: ${err.message ?? err}`;
    }
  }, 10);
}

await init();
document.getElementById("controls").addEventListener("submit", run);
run();
