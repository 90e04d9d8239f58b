import init, { compareRuns, attentionMaps, etaSweep } from "./pkg/echo_web.js";

const COLORS = {
  echo: "#d1495b",
  student_motion: "#00798c",
  always_teacher: "#edae49",
  student_plain: "#66a182",
};
const STAGE_COLORS = { NO_GUIDANCE: "#e6e6e6", MOTION_ONLY: "#8ecae6", TEACHER_GUIDED: "#d1495b" };

const $ = (id) => document.getElementById(id);

function params() {
  return {
    seed: Number($("seed").value),
    eta: Number($("eta").value),
    lambda: Number($("lambda").value),
    tau: Number($("tau").value),
  };
}

function guarded(fn) {
  return () => {
    $("error").textContent = "";
    try {
      fn();
    } catch (e) {
      $("error").textContent = String(e);
    }
  };
}

// maps data ranges onto a canvas with a margin for axis labels
function frame(canvas, xs, ys) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const m = { l: 48, r: 10, t: 10, b: 28 };
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (y0 === y1) { y0 -= 1; y1 += 1; }
  const w = canvas.width - m.l - m.r;
  const h = canvas.height - m.t - m.b;
  const sx = (x) => m.l + ((x - x0) / (x1 - x0 || 1)) * w;
  const sy = (y) => m.t + (1 - (y - y0) / (y1 - y0)) * h;
  ctx.strokeStyle = "#999";
  ctx.strokeRect(m.l, m.t, w, h);
  ctx.fillStyle = "#444";
  ctx.font = "11px system-ui";
  ctx.fillText(y1.toPrecision(3), 2, m.t + 10);
  ctx.fillText(y0.toPrecision(3), 2, m.t + h);
  ctx.fillText(String(x0), m.l, canvas.height - 8);
  ctx.fillText(String(x1), m.l + w - 24, canvas.height - 8);
  return { ctx, sx, sy };
}

function line(ctx, pts, color) {
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.beginPath();
  pts.forEach(([x, y], i) => (i ? ctx.lineTo(x, y) : ctx.moveTo(x, y)));
  ctx.stroke();
}

function drawLosses(runs) {
  const all = runs.flatMap((r) => r.steps);
  // time runs right to left in sampling order; plot step index instead
  const n = runs[0].steps.length;
  const { ctx, sx, sy } = frame($("losses"), [0, n - 1], all.map((s) => s.loss));
  for (const r of runs) {
    line(ctx, r.steps.map((s, i) => [sx(i), sy(s.loss)]), COLORS[r.kind]);
  }
  $("legend").innerHTML = runs
    .map((r) => `<span><i class="swatch" style="background:${COLORS[r.kind]}"></i>${r.kind}</span>`)
    .join("");
}

function drawTimeline(runs) {
  const c = $("timeline");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const n = runs[0].steps.length;
  const left = 110;
  const cw = (c.width - left - 10) / n;
  const rh = 40;
  ctx.font = "11px system-ui";
  runs.forEach((r, row) => {
    const y = 20 + row * (rh + 14);
    ctx.fillStyle = "#222";
    ctx.fillText(r.kind, 4, y + rh / 2 + 4);
    r.steps.forEach((s, i) => {
      ctx.fillStyle = STAGE_COLORS[s.stage];
      ctx.fillRect(left + i * cw, y, cw - 1, rh);
      if (s.inner_steps > 0) {
        ctx.fillStyle = "#fff";
        ctx.fillText(String(s.inner_steps), left + i * cw + 2, y + rh - 4);
      }
    });
  });
  let x = 4;
  const y = c.height - 12;
  for (const [stage, color] of Object.entries(STAGE_COLORS)) {
    ctx.fillStyle = color;
    ctx.fillRect(x, y - 9, 10, 10);
    ctx.fillStyle = "#222";
    ctx.fillText(stage.toLowerCase(), x + 14, y);
    x += 120;
  }
}

function fmt(v, digits = 4) {
  return v == null ? "-" : v.toFixed(digits);
}

function drawSummary(runs) {
  const head = "<tr><th>kind</th><th>final loss</th><th>fidelity</th><th>consistency</th><th>teacher NFE</th><th>student NFE</th></tr>";
  const rows = runs.map(
    (r) =>
      `<tr><td>${r.kind}</td><td>${fmt(r.final_loss)}</td><td>${fmt(r.fidelity)}</td>` +
      `<td>${fmt(r.consistency, 5)}</td><td>${r.teacher_nfe}</td><td>${r.student_nfe}</td></tr>`,
  );
  $("summary").innerHTML = head + rows.join("");
}

function heatmap(canvas, rows, value) {
  const ctx = canvas.getContext("2d");
  const n = rows.length;
  const cell = canvas.width / n;
  const vals = rows.flat().map(value);
  const hi = Math.max(...vals) || 1;
  rows.forEach((row, i) =>
    row.forEach((v, j) => {
      const s = Math.round(255 * (1 - value(v) / hi));
      ctx.fillStyle = `rgb(${s},${s},255)`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }),
  );
}

function runComparison() {
  const p = params();
  const runs = JSON.parse(compareRuns(p.seed, p.eta, p.lambda, p.tau));
  drawLosses(runs);
  drawTimeline(runs);
  drawSummary(runs);
}

function showAttention() {
  const p = params();
  const view = JSON.parse(attentionMaps($("kind").value, p.seed, p.eta, p.lambda, p.tau));
  heatmap($("a_ref"), view.reference, (v) => v);
  heatmap($("a_mask"), view.mask, (v) => (v ? 1 : 0));
  heatmap($("a_sample"), view.sample, (v) => v);
}

function runSweep() {
  const p = params();
  const etas = $("sweep_etas").value.split(",").map(Number).filter((x) => !Number.isNaN(x));
  const pts = JSON.parse(etaSweep(new Float64Array(etas), Number($("sweep_seeds").value), p.lambda, p.tau));
  const fid = pts.map((q) => q.fidelity);
  const { ctx, sx, sy } = frame($("sweep_plot"), pts.map((q) => q.eta), fid);
  line(ctx, pts.map((q) => [sx(q.eta), sy(q.fidelity)]), COLORS.echo);
  ctx.fillStyle = "#222";
  pts.forEach((q) => ctx.fillText(`c=${q.consistency.toFixed(4)}`, sx(q.eta) - 20, sy(q.fidelity) - 6));
}

await init();
$("run").addEventListener("click", guarded(runComparison));
$("attn").addEventListener("click", guarded(showAttention));
$("sweep").addEventListener("click", guarded(runSweep));
guarded(runComparison)();
