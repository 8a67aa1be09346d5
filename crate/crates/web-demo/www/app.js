import init, {
  scaling_curve,
  select_records,
  demo_records,
  simulate_adaptation,
} from "./pkg/testtime_web_demo.js";

const $ = (id) => document.getElementById(id);
const SVG = "http://www.w3.org/2000/svg";

function svgEl(tag, attrs) {
  const el = document.createElementNS(SVG, tag);
  for (const [k, v] of Object.entries(attrs)) el.setAttribute(k, v);
  return el;
}

// Draws one or more series of {x, y} points (y in [0, 1]) onto an svg.
function plot(svg, series, xLabel) {
  svg.replaceChildren();
  const w = 420, h = 220, pad = 32;
  const xs = series.flatMap((s) => s.points.map((p) => p.x));
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - y * (h - 2 * pad);
  svg.append(svgEl("line", { x1: pad, y1: sy(0), x2: w - pad, y2: sy(0), stroke: "#888" }));
  svg.append(svgEl("line", { x1: pad, y1: sy(0), x2: pad, y2: sy(1), stroke: "#888" }));
  for (const y of [0, 0.5, 1]) {
    const t = svgEl("text", { x: 4, y: sy(y) + 4, "font-size": 10 });
    t.textContent = y.toFixed(1);
    svg.append(t);
  }
  const label = svgEl("text", { x: w / 2, y: h - 6, "font-size": 11, "text-anchor": "middle" });
  label.textContent = xLabel;
  svg.append(label);
  for (const s of series) {
    const d = s.points.map((p, i) => `${i ? "L" : "M"}${sx(p.x)},${sy(p.y)}`).join(" ");
    svg.append(svgEl("path", { d, fill: "none", stroke: s.color, "stroke-width": 2 }));
    for (const p of s.points) {
      svg.append(svgEl("circle", { cx: sx(p.x), cy: sy(p.y), r: 3, fill: s.color }));
    }
    const last = s.points[s.points.length - 1];
    const tag = svgEl("text", { x: sx(last.x) - 4, y: sy(last.y) - 6, "font-size": 10, fill: s.color, "text-anchor": "end" });
    tag.textContent = s.name;
    svg.append(tag);
  }
}

function table(el, header, rows) {
  el.replaceChildren();
  const head = el.insertRow();
  for (const h of header) {
    const th = document.createElement("th");
    th.textContent = h;
    head.append(th);
  }
  for (const r of rows) {
    const tr = el.insertRow();
    for (const v of r) tr.insertCell().textContent = v;
  }
}

function guard(fn, out) {
  return () => {
    try {
      fn();
    } catch (e) {
      out.textContent = String(e);
      out.classList.add("error");
    }
  };
}

const pct = (x) => (100 * x).toFixed(1) + "%";

function runCurve() {
  const out = $("curve-out");
  out.classList.remove("error");
  const res = JSON.parse(scaling_curve($("cells").value, $("ks").value, Number($("target").value)));
  const pts = res.curve.points;
  plot($("curve-plot"), [
    { name: "fast1@K", color: "#1f6feb", points: pts.map((p) => ({ x: Math.log2(p.K), y: p.mean })) },
  ], "log2 K");
  let text = pts.map((p) => `K=${p.K}\t${pct(p.mean)}\t[${pct(p.ci_low)}, ${pct(p.ci_high)}]`).join("\n");
  const eq = res.equivalent_k;
  if (eq) {
    text += "\nequivalent K: " + (eq.kind === "exact" ? eq.K.toFixed(2) : eq.kind);
  }
  out.textContent = text;
}

function runGenerate() {
  $("records").value = demo_records(Number($("gen-seed").value), Number($("gen-k").value));
}

function runSelect() {
  const res = JSON.parse(select_records($("records").value, 0));
  table(
    $("select-out"),
    ["strategy", "fast1", "rate", "mean speedup"],
    res.summaries.map((s) => [s.strategy, `${s.fast1_count}/${s.units}`, pct(s.fast1_rate), s.mean_speedup.toFixed(3)]),
  );
}

function runSim() {
  const res = JSON.parse(simulate_adaptation(
    Number($("sim-seed").value),
    Number($("sim-k").value),
    Number($("sim-steps").value),
    Number($("sim-lr").value),
  ));
  plot($("sim-plot"), [
    { name: "fast1", color: "#1f6feb", points: res.steps.map((s) => ({ x: s.step, y: s.fast1 })) },
    { name: "expert mass", color: "#d1242f", points: res.steps.map((s) => ({ x: s.step, y: s.expert_mass })) },
  ], "step");
  table(
    $("sim-out"),
    ["step", "fast1", "expert mass", "rollouts", ""],
    res.steps.map((s) => [s.step, pct(s.fast1), s.expert_mass.toFixed(4), s.rollouts, s.step === res.selected_step ? "kept" : ""]),
  );
}

await init();
$("status").textContent = "Ready.";
$("curve-go").onclick = guard(runCurve, $("curve-out"));
$("gen-go").onclick = guard(runGenerate, $("status"));
$("select-go").onclick = guard(runSelect, $("status"));
$("sim-go").onclick = guard(runSim, $("status"));
runCurve();
