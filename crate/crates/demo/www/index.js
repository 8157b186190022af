import init, { ring_samples, steplr_curve, attention_heatmap } from "./pkg/mspg_demo.js";

const SIDE = 16;
const num = (id) => Number(document.getElementById(id).value);
const errorBox = document.getElementById("error");

function guarded(draw) {
  return () => {
    try {
      errorBox.textContent = "";
      draw();
    } catch (e) {
      errorBox.textContent = String(e.message ?? e);
    }
  };
}

function drawRing() {
  const canvas = document.getElementById("ring");
  const ctx = canvas.getContext("2d");
  const modes = num("ring-modes");
  const rows = ring_samples(num("ring-n"), modes, 2.0, num("ring-std"), BigInt(num("ring-seed")));
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const scale = canvas.width / 6;
  for (let i = 0; i < rows.length; i += 3) {
    ctx.fillStyle = `hsl(${(360 * rows[i + 2]) / modes}, 70%, 45%)`;
    ctx.fillRect(canvas.width / 2 + rows[i] * scale - 1, canvas.height / 2 - rows[i + 1] * scale - 1, 2, 2);
  }
}

function drawSchedule() {
  const canvas = document.getElementById("lr");
  const ctx = canvas.getContext("2d");
  const curve = steplr_curve(num("lr-eta"), num("lr-gamma"), num("lr-step"), num("lr-rounds"));
  const top = Math.max(...curve);
  const pad = 30;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, 10, canvas.width - pad - 10, canvas.height - pad - 10);
  ctx.fillStyle = "#333";
  ctx.fillText(top.toExponential(1), 2, 18);
  ctx.fillText("0", pad - 10, canvas.height - pad + 4);
  ctx.fillText(String(curve.length), canvas.width - 40, canvas.height - 10);
  ctx.strokeStyle = "#1565c0";
  ctx.beginPath();
  const w = canvas.width - pad - 10;
  const h = canvas.height - pad - 10;
  curve.forEach((eta, i) => {
    const x = pad + (i / (curve.length - 1)) * w;
    const y = 10 + h * (1 - eta / top);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

let query = [5, 6];

function drawAttention() {
  const canvas = document.getElementById("att");
  const ctx = canvas.getContext("2d");
  const map = attention_heatmap(SIDE, num("att-window"), query[0], query[1], BigInt(num("att-seed")));
  const top = Math.max(...map);
  const cell = canvas.width / SIDE;
  for (let y = 0; y < SIDE; y++) {
    for (let x = 0; x < SIDE; x++) {
      const v = map[y * SIDE + x] / top;
      ctx.fillStyle = `rgb(${Math.round(255 * v)}, ${Math.round(80 * v)}, ${Math.round(40 + 120 * (1 - v))})`;
      ctx.fillRect(x * cell, y * cell, cell, cell);
    }
  }
  ctx.strokeStyle = "#fff";
  ctx.strokeRect(query[0] * cell + 1, query[1] * cell + 1, cell - 2, cell - 2);
}

await init();

const ring = guarded(drawRing);
const schedule = guarded(drawSchedule);
const attention = guarded(drawAttention);
for (const id of ["ring-modes", "ring-std", "ring-n", "ring-seed"]) document.getElementById(id).oninput = ring;
for (const id of ["lr-eta", "lr-gamma", "lr-step", "lr-rounds"]) document.getElementById(id).oninput = schedule;
for (const id of ["att-window", "att-seed"]) document.getElementById(id).oninput = attention;
document.getElementById("att").onclick = (e) => {
  const cell = e.target.width / SIDE;
  query = [Math.floor(e.offsetX / cell), Math.floor(e.offsetY / cell)];
  attention();
};
ring();
schedule();
attention();
