// DOM wiring: canvas, toolbar, and the steering client.

import { makeCamera, panByPixels, zoomAt } from "./camera.js";
import { SteerClient } from "./client.js";
import { Controls } from "./controls.js";
import { Scene } from "./scene.js";

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const instructionSel = document.getElementById("instruction") as HTMLSelectElement;
const statusEl = document.getElementById("status")!;
const ackEl = document.getElementById("ack")!;
const obstacleBtn = document.getElementById("obstacle") as HTMLButtonElement;
const clearBtn = document.getElementById("clear") as HTMLButtonElement;
const pauseBtn = document.getElementById("pause") as HTMLButtonElement;
const resetBtn = document.getElementById("reset") as HTMLButtonElement;

let camera = makeCamera();
const scene = new Scene(camera);
let paused = false;

const url = `ws://${location.host}/ws`;
const client = new SteerClient(url, {
  hello: (m) => {
    instructionSel.innerHTML = "";
    const none = document.createElement("option");
    none.value = "";
    none.textContent = "(no instruction)";
    instructionSel.appendChild(none);
    for (const name of m.vocabulary) {
      const opt = document.createElement("option");
      opt.value = name;
      opt.textContent = name;
      instructionSel.appendChild(opt);
    }
  },
  frame: (m) => {
    scene.pushFrame(m);
    if (m.events.includes("goal-reached")) controls.goalMarker = null;
  },
  ack: (m) => {
    ackEl.textContent = `${m.kind} active at step ${m.active_at}`;
  },
  error: (m) => {
    ackEl.textContent = `error: ${m.message}`;
  },
  state: (s) => {
    statusEl.textContent = s;
    paused = s !== "live";
  },
  badMessage: () => {
    ackEl.textContent = "unreadable message from service";
  },
});
const controls = new Controls(client, camera, { w: canvas.width, h: canvas.height });

instructionSel.addEventListener("change", () => {
  controls.setInstruction(instructionSel.value === "" ? null : instructionSel.value);
});
obstacleBtn.addEventListener("click", () => controls.armObstacle());
clearBtn.addEventListener("click", () => controls.clearGuidance());
pauseBtn.addEventListener("click", () => {
  paused = !paused;
  client.send(paused ? "pause" : "resume");
  pauseBtn.textContent = paused ? "resume" : "pause";
});
resetBtn.addEventListener("click", () => {
  scene.reset();
  client.send("reset", {});
});

let dragStart: [number, number] | null = null;
let panning = false;
canvas.addEventListener("mousedown", (ev) => {
  const r = canvas.getBoundingClientRect();
  dragStart = [ev.clientX - r.left, ev.clientY - r.top];
  panning = ev.button === 1 || ev.altKey;
});
canvas.addEventListener("mousemove", (ev) => {
  if (!dragStart || !panning) return;
  const r = canvas.getBoundingClientRect();
  const px = ev.clientX - r.left;
  const py = ev.clientY - r.top;
  camera = panByPixels(camera, px - dragStart[0], py - dragStart[1]);
  scene.camera = camera;
  controls.camera = camera;
  dragStart = [px, py];
});
canvas.addEventListener("mouseup", (ev) => {
  if (!dragStart) return;
  const r = canvas.getBoundingClientRect();
  const px = ev.clientX - r.left;
  const py = ev.clientY - r.top;
  if (!panning) {
    if (ev.shiftKey) {
      controls.drag(dragStart[0], dragStart[1], px, py) ?? controls.click(px, py);
    } else {
      controls.click(px, py);
    }
  }
  dragStart = null;
  panning = false;
});
canvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  const r = canvas.getBoundingClientRect();
  camera = zoomAt(camera, canvas.width, canvas.height,
    ev.clientX - r.left, ev.clientY - r.top, ev.deltaY < 0 ? 1.15 : 1 / 1.15);
  scene.camera = camera;
  controls.camera = camera;
});

function tick() {
  scene.render(ctx, canvas.width, canvas.height, client.lastFrame,
    controls.goalMarker, controls.velocityArrow, paused);
  requestAnimationFrame(tick);
}
tick();
