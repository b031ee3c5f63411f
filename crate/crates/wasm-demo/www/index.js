import init, { Demo, weakBox } from "./pkg/debiaskit_wasm.js";

const $ = (id) => document.getElementById(id);
const canvas = $("view");
const ctx = canvas.getContext("2d");
let demo = null;
let rows = [];

function build() {
  $("status").textContent = "training…";
  // let the status paint before the synchronous build
  setTimeout(() => {
    demo?.free();
    demo = new Demo(BigInt($("seed").value), $("oracle").checked);
    $("index").max = demo.imageCount() - 1;
    $("status").textContent = `${demo.imageCount()} web images`;
    detect();
  }, 10);
}

function thresholds() {
  const eta = Number($("eta").value), eps = Number($("eps").value);
  $("etav").textContent = eta.toFixed(2);
  $("epsv").textContent = eps.toFixed(2);
  return [eta, eps];
}

function detect() {
  const i = Number($("index").value);
  $("indexv").textContent = i;
  rows = JSON.parse(demo.debias(i, ...thresholds()));
  draw();
}

function replay() {
  rows = JSON.parse(demo.replay(...thresholds()));
  draw();
}

function rect(b, scale, style, dash = []) {
  ctx.strokeStyle = style;
  ctx.setLineDash(dash);
  ctx.strokeRect(b[0] * scale + 0.5, b[1] * scale + 0.5, b[2] * scale - 1, b[3] * scale - 1);
}

function draw() {
  const i = Number($("index").value);
  const n = demo.imageSize();
  const img = new ImageData(new Uint8ClampedArray(demo.imageRgba(i)), n, n);
  const off = new OffscreenCanvas(n, n);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  const scale = canvas.width / n;
  ctx.lineWidth = 2;

  const info = JSON.parse(demo.describe(i));
  for (const p of info.planted) rect(p.box, scale, "#fff");
  for (const r of rows) {
    rect(r.region, scale, r.retained ? "#0c0" : "#d00");
    if (r.object) rect(r.object, scale, r.retained ? "#0c0" : "#d00", [4, 3]);
  }
  const lambda = Number($("lambda").value);
  $("lambdav").textContent = lambda.toFixed(2);
  rect(weakBox(n, n, lambda), scale, "#fc0", [2, 4]);

  const truth = info.tag_matches_content === false ? "tag names no planted object" : "tag matches content";
  $("info").textContent = `${info.id}: tagged "${info.tag}", ${info.planted.length} planted, ${truth}`;
  const kept = rows.filter((r) => r.retained).length;
  $("rows").innerHTML =
    `<tr><th>region</th><th>IoU</th><th>objectness</th><th>predicted</th><th>form</th><th>label</th></tr>` +
    rows.map((r) => `<tr class="${r.retained ? "kept" : "dropped"}"><td>${r.region.join(",")}</td>` +
      `<td>${r.iou.toFixed(2)}</td><td>${r.objectness.toFixed(3)}</td><td>${r.predicted}</td>` +
      `<td>${r.form ? "✓" : "✗"}</td><td>${r.label ? "✓" : "✗"}</td></tr>`).join("") +
    `<tr><td colspan="6">${kept} of ${rows.length} regions kept</td></tr>`;
}

await init();
$("build").onclick = build;
$("index").oninput = detect;
$("eta").oninput = replay;
$("eps").oninput = replay;
$("lambda").oninput = draw;
build();
