import { ApiClient } from './api.js';
import { ChatApp } from './app.js';

// Base URL is configurable for deployments where the API is not served
// from the same origin (set window.HYPOGRAPH_API before this script).
const base = (window as { HYPOGRAPH_API?: string }).HYPOGRAPH_API ?? '';
const root = document.getElementById('app');
if (root) {
  void new ChatApp(root, new ApiClient(base)).start();
}
