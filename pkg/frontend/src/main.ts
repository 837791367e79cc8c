import { RetrievalClient } from "./api.js";
import { StudioApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("service") ?? "http://127.0.0.1:8000";

const app = new StudioApp(document, new RetrievalClient(baseUrl));
void app.init();

// exposed for scripted driving in integration checks
(window as unknown as { studio: StudioApp }).studio = app;
